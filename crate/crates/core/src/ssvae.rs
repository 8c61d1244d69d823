//! The extended semi-supervised VAE.
//!
//! A shared tanh backbone over the features feeds four encoder heads (class,
//! group, latent mean, latent log-variance) plus an auxiliary label-imputer
//! head; a decoder maps (group, label, latent) one-hot-plus-latent inputs
//! back to a reconstruction mean. Observed labels and groups enter through
//! the observation channels of [`crate::obs`], giving conditioned posteriors
//! by Bayes rule on the tape.
//!
//! The training objective is the negative ELBO plus channel prior penalties
//! and supervised observation terms; the fairness-regularized objective adds
//! `lambda` times the Monte Carlo fairness risk, which consumes stop-gradient
//! posteriors and the differentiable class-head probabilities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AdError, Binding, ParamId, Parameters, Tape, Tensor, Var};
use crate::data::Batch;
use crate::dist::DistError;
use crate::math;
use crate::obs::{
    ChannelMode, ChannelPrior, ChannelVars, LabelChannel, Obs, ObservationModel, RecoveredRates,
};
use crate::risk::{
    mc_fairness_risk, McConfig, MissingnessPosteriors, PosteriorState, RiskError, RiskEval,
};
use crate::{risk, stream};

/// Parameter-name prefixes of the two recused components.
pub const GROUP_HEAD_PREFIX: &str = "group_head";
pub const IMPUTER_PREFIX: &str = "imputer";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("record {record}: observation {observed:?} has zero probability under the model")]
    InconsistentRecord { record: usize, observed: Obs },
    #[error("label imputation requires at least one observed label")]
    NoObservedLabels,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dimension mismatch: model expects {expected}, batch has {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Autodiff(#[from] AdError),
    #[error("{0}")]
    Risk(#[from] RiskError),
    #[error("{0}")]
    Dist(#[from] DistError),
}

/// Network shape: shared backbone widths and the latent dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub z_dim: usize,
}

impl ArchConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            z_dim: 8,
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_z_dim(mut self, z_dim: usize) -> Self {
        self.z_dim = z_dim;
        self
    }
}

/// Label-channel choice: fixed shared missing rate (default) or a learnable
/// class-conditional channel.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelChannelConfig {
    FixedRate(f64),
    Learnable { prior: ChannelPrior, init_rate: f64 },
}

/// Everything needed to build a model.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    pub group_channel_mode: ChannelMode,
    pub group_channel_prior: ChannelPrior,
    /// Initial missing rate for the learnable group channel.
    pub channel_init_rate: f64,
    pub label_channel: LabelChannelConfig,
    /// Fixed class prior P(y = 1).
    pub label_prior_p1: f64,
    /// Fixed group prior P(a = 1).
    pub group_prior_p1: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults around empirical statistics of a training view: priors from
    /// the observed value frequencies, label missing rate from the observed
    /// unavailable fraction.
    pub fn for_data(view: &crate::data::TrainView<'_>, seed: u64) -> Self {
        let frac = |obs: &[Obs]| {
            let mut ones = 0usize;
            let mut seen = 0usize;
            for o in obs {
                if let Some(v) = o.value() {
                    seen += 1;
                    ones += usize::from(v == 1);
                }
            }
            if seen == 0 {
                0.5
            } else {
                (ones as f64 / seen as f64).clamp(0.05, 0.95)
            }
        };
        let missing_frac = |obs: &[Obs]| {
            obs.iter().filter(|o| o.is_missing()).count() as f64 / obs.len().max(1) as f64
        };
        Self {
            arch: ArchConfig::new(view.n_features()),
            group_channel_mode: ChannelMode::NoMisrepresentation,
            group_channel_prior: ChannelPrior::default_beta(),
            channel_init_rate: 0.3,
            label_channel: LabelChannelConfig::FixedRate(
                missing_frac(view.label_obs).clamp(0.0, 0.95),
            ),
            label_prior_p1: frac(view.label_obs),
            group_prior_p1: frac(view.group_obs),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Vec<Dense>,
    class_head: Dense,
    group_head: Dense,
    z_mean_head: Dense,
    z_logvar_head: Dense,
    imputer_head: Dense,
    decoder: Vec<Dense>,
}

/// The model: a named parameter bundle plus the layer layout, channels, and
/// fixed priors.
#[derive(Debug, Clone)]
pub struct SsVaeModel {
    pub params: Parameters,
    arch: ArchConfig,
    layout: Layout,
    group_channel: ObservationModel,
    label_channel: LabelChannel,
    label_prior_p1: f64,
    group_prior_p1: f64,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = math::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::matrix(rows, cols, data).expect("glorot shape")
}

impl SsVaeModel {
    pub fn new(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut params = Parameters::new();
        let mut rng = stream::stream(config.seed, stream::names::INIT);
        let arch = config.arch.clone();

        let dense = |params: &mut Parameters,
                     rng: &mut rand_chacha::ChaCha8Rng,
                     name: &str,
                     fan_in: usize,
                     fan_out: usize|
         -> Result<Dense, AdError> {
            Ok(Dense {
                weight: params.register(&format!("{name}.weight"), glorot(rng, fan_in, fan_out))?,
                bias: params
                    .register(&format!("{name}.bias"), Tensor::vector(vec![0.0; fan_out]))?,
            })
        };

        let mut backbone = Vec::new();
        let mut width = arch.input_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            backbone.push(dense(&mut params, &mut rng, &format!("backbone.{i}"), width, h)?);
            width = h;
        }
        let class_head = dense(&mut params, &mut rng, "class_head", width, 2)?;
        let group_head = dense(&mut params, &mut rng, GROUP_HEAD_PREFIX, width, 2)?;
        let z_mean_head = dense(&mut params, &mut rng, "z_mean", width, arch.z_dim)?;
        let z_logvar_head = dense(&mut params, &mut rng, "z_logvar", width, arch.z_dim)?;
        let imputer_head = dense(&mut params, &mut rng, IMPUTER_PREFIX, width, 2)?;

        let mut decoder = Vec::new();
        let mut dwidth = 4 + arch.z_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            decoder.push(dense(&mut params, &mut rng, &format!("decoder.{i}"), dwidth, h)?);
            dwidth = h;
        }
        decoder.push(dense(
            &mut params,
            &mut rng,
            &format!("decoder.{}", arch.hidden.len()),
            dwidth,
            arch.input_dim,
        )?);

        let group_channel = ObservationModel::register(
            &mut params,
            "group_channel",
            config.group_channel_mode,
            config.group_channel_prior,
            config.channel_init_rate,
        )?;
        let label_channel = match &config.label_channel {
            LabelChannelConfig::FixedRate(rate) => LabelChannel::Fixed {
                missing_rate: *rate,
            },
            LabelChannelConfig::Learnable { prior, init_rate } => {
                LabelChannel::Learnable(ObservationModel::register(
                    &mut params,
                    "label_channel",
                    ChannelMode::NoMisrepresentation,
                    *prior,
                    *init_rate,
                )?)
            }
        };

        Ok(Self {
            params,
            arch,
            layout: Layout {
                backbone,
                class_head,
                group_head,
                z_mean_head,
                z_logvar_head,
                imputer_head,
                decoder,
            },
            group_channel,
            label_channel,
            label_prior_p1: config.label_prior_p1,
            group_prior_p1: config.group_prior_p1,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn group_channel(&self) -> &ObservationModel {
        &self.group_channel
    }

    pub fn label_channel(&self) -> &LabelChannel {
        &self.label_channel
    }

    /// Current recovered missing rates of the group channel.
    pub fn group_rates(&self) -> RecoveredRates {
        self.group_channel.extract_rates(&self.params)
    }

    fn dense_forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        layer: &Dense,
        input: Var,
    ) -> Result<Var, AdError> {
        let a = tape.matmul(input, binding.var(layer.weight))?;
        tape.add_bias(a, binding.var(layer.bias))
    }

    fn backbone_forward(&self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var, AdError> {
        let mut h = x;
        for layer in &self.layout.backbone {
            let a = self.dense_forward(tape, binding, layer, h)?;
            h = tape.tanh(a);
        }
        Ok(h)
    }

    /// Positive-class probability of a 2-way softmax head.
    fn head_prob(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        head: &Dense,
        features: Var,
    ) -> Result<Var, AdError> {
        let logits = self.dense_forward(tape, binding, head, features)?;
        let probs = tape.softmax_last(logits);
        tape.select_col(probs, 1)
    }

    /// Condition head probabilities on observations through a channel:
    /// `posterior ∝ head * P(observed | latent)`. Returns the posterior and
    /// the per-record marginal `sum_latent head * P(observed | latent)`.
    fn condition(
        &self,
        tape: &mut Tape,
        head_p1: Var,
        rows: &ChannelVars,
        observed: &[Obs],
    ) -> Result<(Var, Var), ModelError> {
        let idx: Vec<usize> = observed.iter().map(|o| o.index()).collect();
        let lik0 = tape.gather(rows.row0, &idx)?;
        let lik1 = tape.gather(rows.row1, &idx)?;
        let one = tape.scalar(1.0);
        let head_p0 = tape.sub(one, head_p1)?;
        let u0 = tape.mul(head_p0, lik0)?;
        let u1 = tape.mul(head_p1, lik1)?;
        let marginal = tape.add(u0, u1)?;
        if let Some(record) = tape.value(marginal).data().iter().position(|&m| m <= 0.0) {
            return Err(ModelError::InconsistentRecord {
                record,
                observed: observed[record],
            });
        }
        let posterior = tape.div(u1, marginal)?;
        Ok((posterior, marginal))
    }

    /// Run the encoder on a batch: heads, conditioned posteriors, latent
    /// Gaussian parameters, imputer probabilities, and channel rows.
    pub fn encode(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
    ) -> Result<ForwardPass, ModelError> {
        if batch.n_records() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if batch.features.shape()[1] != self.arch.input_dim {
            return Err(ModelError::FeatureDimMismatch {
                expected: self.arch.input_dim,
                got: batch.features.shape()[1],
            });
        }
        let x = tape.constant(batch.features.clone());
        let features = self.backbone_forward(tape, binding, x)?;

        let class_probs = self.head_prob(tape, binding, &self.layout.class_head, features)?;
        let group_probs = self.head_prob(tape, binding, &self.layout.group_head, features)?;
        let z_mean = self.dense_forward(tape, binding, &self.layout.z_mean_head, features)?;
        let z_logvar = self.dense_forward(tape, binding, &self.layout.z_logvar_head, features)?;

        // The imputer head leverages the backbone features but must not
        // steer them: it reads a stop-gradient copy.
        let frozen_features = tape.stop_gradient(features);
        let imputer_probs =
            self.head_prob(tape, binding, &self.layout.imputer_head, frozen_features)?;

        let group_rows = self.group_channel.channel_vars(tape, binding)?;
        let label_rows = self.label_channel.channel_vars(tape, binding)?;
        let (post_group, group_marginal) =
            self.condition(tape, group_probs, &group_rows, &batch.group_obs)?;
        let (post_label, label_marginal) =
            self.condition(tape, class_probs, &label_rows, &batch.label_obs)?;

        Ok(ForwardPass {
            x,
            features,
            class_probs,
            group_probs,
            post_label,
            post_group,
            label_marginal,
            group_marginal,
            z_mean,
            z_logvar,
            imputer_probs,
            group_rows,
            label_rows,
        })
    }

    /// Decoder MLP over per-record one-hot group and label bits plus the
    /// latent vector. Returns the reconstruction mean `[n, input_dim]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        group_bits: &[u8],
        label_bits: &[u8],
        z: Var,
    ) -> Result<Var, ModelError> {
        let n = tape.value(z).shape()[0];
        if group_bits.len() != n || label_bits.len() != n {
            return Err(ModelError::FeatureDimMismatch {
                expected: n,
                got: group_bits.len().min(label_bits.len()),
            });
        }
        let mut onehot = Vec::with_capacity(n * 4);
        for i in 0..n {
            let (a, y) = (group_bits[i], label_bits[i]);
            onehot.extend_from_slice(&[
                f64::from(a == 0),
                f64::from(a == 1),
                f64::from(y == 0),
                f64::from(y == 1),
            ]);
        }
        let cond = tape.constant(Tensor::matrix(n, 4, onehot).expect("onehot shape"));
        let mut h = tape.concat(&[cond, z])?;
        let last = self.layout.decoder.len() - 1;
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            h = self.dense_forward(tape, binding, layer, h)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Per-record unit-variance Gaussian log-likelihood of `x` at `mean`.
    pub fn recon_loglik(&self, tape: &mut Tape, x: Var, mean: Var) -> Result<Var, AdError> {
        let d = self.arch.input_dim as f64;
        let diff = tape.sub(x, mean)?;
        let sq = tape.mul(diff, diff)?;
        let sums = tape.row_sum(sq);
        let half = tape.scalar(-0.5);
        let scaled = tape.mul(sums, half)?;
        let offset = tape.scalar(-0.5 * d * math::LN_2PI);
        tape.add(scaled, offset)
    }

    /// Reparameterized latent sample `z = mean + exp(log_var / 2) * noise`.
    pub fn latent_sample(
        &self,
        tape: &mut Tape,
        z_mean: Var,
        z_logvar: Var,
        noise: &Tensor,
    ) -> Result<Var, AdError> {
        let half = tape.scalar(0.5);
        let half_lv = tape.mul(z_logvar, half)?;
        let std = tape.exp(half_lv);
        let eps = tape.constant(noise.clone());
        let scaled = tape.mul(std, eps)?;
        tape.add(z_mean, scaled)
    }

    fn safe_ln(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let clamped = tape.clamp_min(x, math::PROB_FLOOR);
        tape.ln(clamped)
    }

    /// Binary KL `KL[Bern(q) || Bern(p1)]` elementwise over a batch vector,
    /// with exact-zero handling of degenerate posteriors.
    fn kl_binary(&self, tape: &mut Tape, q1: Var, p1: f64) -> Result<Var, AdError> {
        let one = tape.scalar(1.0);
        let q0 = tape.sub(one, q1)?;
        let lq1 = self.safe_ln(tape, q1)?;
        let lq0 = self.safe_ln(tape, q0)?;
        let lp1 = tape.scalar(math::ln(p1));
        let lp0 = tape.scalar(math::ln(1.0 - p1));
        let d1 = tape.sub(lq1, lp1)?;
        let d0 = tape.sub(lq0, lp0)?;
        let t1 = tape.mul(q1, d1)?;
        let t0 = tape.mul(q0, d0)?;
        tape.add(t0, t1)
    }

    /// Expected channel log-likelihood per record:
    /// `E_{v ~ Bern(post)} ln P(observed | v)`.
    fn expected_channel_loglik(
        &self,
        tape: &mut Tape,
        post: Var,
        rows: &ChannelVars,
        observed: &[Obs],
    ) -> Result<Var, AdError> {
        let idx: Vec<usize> = observed.iter().map(|o| o.index()).collect();
        let lik0 = tape.gather(rows.row0, &idx)?;
        let lik1 = tape.gather(rows.row1, &idx)?;
        let ll0 = self.safe_ln(tape, lik0)?;
        let ll1 = self.safe_ln(tape, lik1)?;
        let one = tape.scalar(1.0);
        let post0 = tape.sub(one, post)?;
        let t1 = tape.mul(post, ll1)?;
        let t0 = tape.mul(post0, ll0)?;
        tape.add(t0, t1)
    }

    /// Per-record evidence lower bound.
    ///
    /// The reconstruction expectation marginalizes exactly over the four
    /// joint (group, label) values weighted by the conditioned posteriors;
    /// one reparameterized latent sample per record comes from `z_noise`.
    pub fn elbo_per_record(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
    ) -> Result<(ElboParts, ForwardPass), ModelError> {
        let fp = self.encode(tape, binding, batch)?;
        let n = batch.n_records();
        let z = self.latent_sample(tape, fp.z_mean, fp.z_logvar, z_noise)?;

        let one = tape.scalar(1.0);
        let post_a0 = tape.sub(one, fp.post_group)?;
        let post_y0 = tape.sub(one, fp.post_label)?;

        let mut recon: Option<Var> = None;
        for (a_bit, y_bit) in [(0u8, 0u8), (0, 1), (1, 0), (1, 1)] {
            let mean = self.decode(tape, binding, &vec![a_bit; n], &vec![y_bit; n], z)?;
            let ll = self.recon_loglik(tape, fp.x, mean)?;
            let wa = if a_bit == 1 { fp.post_group } else { post_a0 };
            let wy = if y_bit == 1 { fp.post_label } else { post_y0 };
            let w = tape.mul(wa, wy)?;
            let contrib = tape.mul(w, ll)?;
            recon = Some(match recon {
                Some(acc) => tape.add(acc, contrib)?,
                None => contrib,
            });
        }
        let recon = recon.expect("four combinations");

        let obs_label =
            self.expected_channel_loglik(tape, fp.post_label, &fp.label_rows, &batch.label_obs)?;
        let obs_group =
            self.expected_channel_loglik(tape, fp.post_group, &fp.group_rows, &batch.group_obs)?;

        // KL of the latent Gaussian against the standard normal, per record.
        let exp_lv = tape.exp(fp.z_logvar);
        let mean_sq = tape.mul(fp.z_mean, fp.z_mean)?;
        let sum1 = tape.add(exp_lv, mean_sq)?;
        let minus_one = tape.scalar(-1.0);
        let sum2 = tape.add(sum1, minus_one)?;
        let sum3 = tape.sub(sum2, fp.z_logvar)?;
        let rows = tape.row_sum(sum3);
        let half = tape.scalar(0.5);
        let kl_z = tape.mul(rows, half)?;

        let kl_y = self.kl_binary(tape, fp.post_label, self.label_prior_p1)?;
        let kl_a = self.kl_binary(tape, fp.post_group, self.group_prior_p1)?;

        let mut elbo = tape.add(recon, obs_label)?;
        elbo = tape.add(elbo, obs_group)?;
        elbo = tape.sub(elbo, kl_z)?;
        elbo = tape.sub(elbo, kl_y)?;
        elbo = tape.sub(elbo, kl_a)?;
        Ok((
            ElboParts {
                per_record: elbo,
                kl_z,
                kl_y,
                kl_a,
            },
            fp,
        ))
    }

    /// Batch-mean ELBO.
    pub fn elbo(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
    ) -> Result<Var, ModelError> {
        let (parts, _) = self.elbo_per_record(tape, binding, batch, z_noise)?;
        Ok(tape.mean(parts.per_record))
    }

    /// The training loss without fairness: channel prior penalties minus the
    /// batch mean of ELBO plus the supervised observation terms.
    ///
    /// `omega_scale` weights the prior penalty; the public contract uses 1,
    /// while the mini-batch trainer scales it by `batch / n_train` so one
    /// epoch applies the prior once in dataset units.
    pub fn ssvae_loss_scaled(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
        omega_scale: f64,
    ) -> Result<SsVaeLossOut, ModelError> {
        let (elbo_parts, fp) = self.elbo_per_record(tape, binding, batch, z_noise)?;
        let elbo = elbo_parts.per_record;

        // Supervised terms: indicator-masked log marginals of the observed
        // label and group under head-times-channel.
        let mask_of = |observed: &[Obs]| {
            Tensor::vector(
                observed
                    .iter()
                    .map(|o| f64::from(!o.is_missing()))
                    .collect(),
            )
        };
        let lm = self.safe_ln(tape, fp.label_marginal)?;
        let label_mask = tape.constant(mask_of(&batch.label_obs));
        let sup_label = tape.mul(lm, label_mask)?;
        let gm = self.safe_ln(tape, fp.group_marginal)?;
        let group_mask = tape.constant(mask_of(&batch.group_obs));
        let sup_group = tape.mul(gm, group_mask)?;

        let mut inner = tape.add(elbo, sup_label)?;
        inner = tape.add(inner, sup_group)?;
        let mean = tape.mean(inner);

        let mut omega = self.group_channel.prior_penalty(tape, binding)?;
        if let Some(label_omega) = self.label_channel.prior_penalty(tape, binding)? {
            omega = tape.add(omega, label_omega)?;
        }
        let scale = tape.scalar(omega_scale);
        let omega = tape.mul(omega, scale)?;
        let loss = tape.sub(omega, mean)?;
        Ok(SsVaeLossOut {
            loss,
            elbo: elbo_parts,
            fp,
        })
    }

    /// [`SsVaeModel::ssvae_loss_scaled`] with the prior penalty at weight 1.
    pub fn ssvae_loss(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
    ) -> Result<SsVaeLossOut, ModelError> {
        self.ssvae_loss_scaled(tape, binding, batch, z_noise, 1.0)
    }

    /// Cross-entropy of the imputer head on observed labels, batch-mean over
    /// those records. `None` when the batch has no observed label.
    pub fn imputer_cross_entropy(
        &self,
        tape: &mut Tape,
        fp: &ForwardPass,
        batch: &Batch,
    ) -> Result<Option<Var>, ModelError> {
        let observed: Vec<(usize, u8)> = batch
            .label_obs
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.value().map(|v| (i, v)))
            .collect();
        if observed.is_empty() {
            return Ok(None);
        }
        let one = tape.scalar(1.0);
        let p0 = tape.sub(one, fp.imputer_probs)?;
        let lp1 = self.safe_ln(tape, fp.imputer_probs)?;
        let lp0 = self.safe_ln(tape, p0)?;
        let n = batch.n_records();
        let mut w1 = vec![0.0; n];
        let mut w0 = vec![0.0; n];
        let scale = -1.0 / observed.len() as f64;
        for (i, v) in observed {
            if v == 1 {
                w1[i] = scale;
            } else {
                w0[i] = scale;
            }
        }
        let w1 = tape.constant(Tensor::vector(w1));
        let w0 = tape.constant(Tensor::vector(w0));
        let t1 = tape.mul(w1, lp1)?;
        let t0 = tape.mul(w0, lp0)?;
        let total = tape.add(t0, t1)?;
        Ok(Some(tape.sum(total)))
    }

    /// Per-record label distribution used by the fairness risk: clamped to
    /// the observation where available (truthful channel), the imputer head
    /// elsewhere. Values are detached from any tape.
    pub fn impute_labels(&self, batch: &Batch) -> Result<Vec<PosteriorState>, ModelError> {
        if !batch.label_obs.iter().any(|o| !o.is_missing()) {
            return Err(ModelError::NoObservedLabels);
        }
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let fp = self.encode(&mut tape, &binding, batch)?;
        let probs = tape.value(fp.imputer_probs).data();
        Ok(batch
            .label_obs
            .iter()
            .zip(probs)
            .map(|(o, &p)| match o.value() {
                Some(v) => PosteriorState::Committed(v),
                None => PosteriorState::Random(p),
            })
            .collect())
    }

    /// Stop-gradient posteriors feeding the Monte Carlo fairness risk:
    /// groups from the conditioned group posterior (committed where observed
    /// under no-misrepresentation), labels from the imputer (committed where
    /// observed).
    pub fn risk_posteriors(
        &self,
        tape: &Tape,
        fp: &ForwardPass,
        batch: &Batch,
    ) -> Result<MissingnessPosteriors, ModelError> {
        let group_vals = tape.value(fp.post_group).data();
        let imputer_vals = tape.value(fp.imputer_probs).data();
        let commit_observed_group = self.group_channel.mode() == ChannelMode::NoMisrepresentation;
        let group = batch
            .group_obs
            .iter()
            .zip(group_vals)
            .map(|(o, &p)| match o.value() {
                Some(v) if commit_observed_group => PosteriorState::Committed(v),
                _ => PosteriorState::Random(p.clamp(0.0, 1.0)),
            })
            .collect();
        let label = batch
            .label_obs
            .iter()
            .zip(imputer_vals)
            .map(|(o, &p)| match o.value() {
                Some(v) => PosteriorState::Committed(v),
                None => PosteriorState::Random(p.clamp(0.0, 1.0)),
            })
            .collect();
        Ok(MissingnessPosteriors::new(group, label)?)
    }

    /// The fairness-regularized objective: SS-VAE loss plus `lambda` times
    /// the Monte Carlo fairness risk of the class-head probabilities.
    #[allow(clippy::too_many_arguments)]
    pub fn fair_objective_scaled(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
        lambda: f64,
        metric: risk::FairnessMetric,
        mc: &McConfig,
        omega_scale: f64,
    ) -> Result<FairLoss, ModelError> {
        let out = self.ssvae_loss_scaled(tape, binding, batch, z_noise, omega_scale)?;
        if lambda == 0.0 {
            return Ok(FairLoss {
                total: out.loss,
                ssvae: out.loss,
                elbo: out.elbo,
                risk: None,
                fp: out.fp,
            });
        }
        let posteriors = self.risk_posteriors(tape, &out.fp, batch)?;
        let risk_eval = mc_fairness_risk(tape, out.fp.class_probs, &posteriors, metric, mc)?;
        let weight = tape.scalar(lambda);
        let weighted = tape.mul(risk_eval.risk, weight)?;
        let total = tape.add(out.loss, weighted)?;
        Ok(FairLoss {
            total,
            ssvae: out.loss,
            elbo: out.elbo,
            risk: Some(risk_eval),
            fp: out.fp,
        })
    }

    /// [`SsVaeModel::fair_objective_scaled`] with the prior penalty at
    /// weight 1.
    pub fn fair_objective(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
        lambda: f64,
        metric: risk::FairnessMetric,
        mc: &McConfig,
    ) -> Result<FairLoss, ModelError> {
        self.fair_objective_scaled(tape, binding, batch, z_noise, lambda, metric, mc, 1.0)
    }

    /// As [`SsVaeModel::fair_objective`], but with the Monte Carlo joint
    /// assignments frozen by the caller (finite-difference checks need the
    /// draws fixed across perturbed evaluations).
    #[allow(clippy::too_many_arguments)]
    pub fn fair_objective_frozen(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        z_noise: &Tensor,
        lambda: f64,
        metric: risk::FairnessMetric,
        assignments: &risk::JointAssignments,
    ) -> Result<FairLoss, ModelError> {
        let out = self.ssvae_loss(tape, binding, batch, z_noise)?;
        let risk_eval = risk::risk_with_assignments(tape, out.fp.class_probs, assignments, metric)?;
        let weight = tape.scalar(lambda);
        let weighted = tape.mul(risk_eval.risk, weight)?;
        let total = tape.add(out.loss, weighted)?;
        Ok(FairLoss {
            total,
            ssvae: out.loss,
            elbo: out.elbo,
            risk: Some(risk_eval),
            fp: out.fp,
        })
    }

    /// Draw the per-record latent noise for one step.
    pub fn draw_latent_noise(&self, n_records: usize, rng: &mut impl Rng) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..n_records * self.arch.z_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Tensor::matrix(n_records, self.arch.z_dim, data).expect("noise shape")
    }

    /// Value-level class, group, and imputer probabilities for a feature
    /// matrix, with no access to observations.
    ///
    /// Prediction never conditions through the channels: the classifier is
    /// the bare class head. The group posterior is conditioned on the
    /// unavailable outcome (always possible under the learnable group
    /// channel, whose rates stay interior).
    pub fn head_values(&self, features: &Tensor) -> Result<HeadValues, ModelError> {
        if features.shape()[1] != self.arch.input_dim {
            return Err(ModelError::FeatureDimMismatch {
                expected: self.arch.input_dim,
                got: features.shape()[1],
            });
        }
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let x = tape.constant(features.clone());
        let h = self.backbone_forward(&mut tape, &binding, x)?;
        let class = self.head_prob(&mut tape, &binding, &self.layout.class_head, h)?;
        let group = self.head_prob(&mut tape, &binding, &self.layout.group_head, h)?;
        let imputer = self.head_prob(&mut tape, &binding, &self.layout.imputer_head, h)?;

        let table = self.group_channel.channel_table(&self.params);
        let miss = Obs::Missing.index();
        let group_posterior_missing = tape
            .value(group)
            .data()
            .iter()
            .map(|&p| {
                let u1 = p * table.row1[miss];
                let u0 = (1.0 - p) * table.row0[miss];
                if u0 + u1 > 0.0 {
                    u1 / (u0 + u1)
                } else {
                    p
                }
            })
            .collect();
        Ok(HeadValues {
            class_probs: tape.value(class).data().to_vec(),
            group_posterior_missing,
            imputer_probs: tape.value(imputer).data().to_vec(),
        })
    }
}

/// Tape handles produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub x: Var,
    pub features: Var,
    /// `q(y = 1 | x)`, the class-head probability (the classifier output).
    pub class_probs: Var,
    /// `q(a = 1 | x)`, the group-head probability.
    pub group_probs: Var,
    /// `q(y = 1 | x, observed label)`.
    pub post_label: Var,
    /// `q(a = 1 | x, observed group)`.
    pub post_group: Var,
    /// `sum_y q(y|x) P(observed | y)` per record.
    pub label_marginal: Var,
    /// `sum_a q(a|x) P(observed | a)` per record.
    pub group_marginal: Var,
    pub z_mean: Var,
    pub z_logvar: Var,
    /// Imputer-head probability `P(y = 1 | x)` on stop-gradient features.
    pub imputer_probs: Var,
    pub group_rows: ChannelVars,
    pub label_rows: ChannelVars,
}

/// Per-record ELBO with its KL components (each a vector over the batch).
#[derive(Debug, Clone, Copy)]
pub struct ElboParts {
    pub per_record: Var,
    pub kl_z: Var,
    pub kl_y: Var,
    pub kl_a: Var,
}

/// The SS-VAE loss with its pieces.
#[derive(Debug, Clone)]
pub struct SsVaeLossOut {
    pub loss: Var,
    pub elbo: ElboParts,
    pub fp: ForwardPass,
}

/// The assembled fairness-regularized loss.
#[derive(Debug, Clone)]
pub struct FairLoss {
    pub total: Var,
    pub ssvae: Var,
    pub elbo: ElboParts,
    pub risk: Option<RiskEval>,
    pub fp: ForwardPass,
}

/// Value-level head outputs for prediction and test-time labeling.
#[derive(Debug, Clone)]
pub struct HeadValues {
    pub class_probs: Vec<f64>,
    /// `q(a = 1 | x, unavailable)` per record.
    pub group_posterior_missing: Vec<f64>,
    pub imputer_probs: Vec<f64>,
}

/// Parameters whose gradient must be exactly zero under the recused
/// Monte Carlo fairness risk.
pub fn is_recused_parameter(name: &str) -> bool {
    name.starts_with(GROUP_HEAD_PREFIX) || name.starts_with(IMPUTER_PREFIX)
}
