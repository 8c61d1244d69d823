//! Learnable observation channels for the sensitive group and the label.
//!
//! A channel maps a latent binary value to its observation, which may be the
//! unavailable outcome. Channels are stored through unconstrained parameters
//! (logistic rates or row softmax logits), so every optimizer step preserves
//! row-stochasticity by construction. The default no-misrepresentation mode
//! forces the cross entries `P(observed = 1 - latent)` to exactly zero and
//! keeps only the two missing rates learnable: the rate for latent value 1
//! (`alpha`) and for latent value 0 (`beta`).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{AdError, Binding, ParamId, Parameters, Tape, Tensor, Var};
use crate::dist::BinaryCategorical;
use crate::math;

/// An observed value: a binary outcome or the explicit unavailable outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Obs {
    Zero,
    One,
    Missing,
}

impl Obs {
    /// Column index in channel tables: 0, 1, then the unavailable outcome.
    pub fn index(self) -> usize {
        match self {
            Obs::Zero => 0,
            Obs::One => 1,
            Obs::Missing => 2,
        }
    }

    pub fn from_bit(v: u8) -> Self {
        if v == 0 {
            Obs::Zero
        } else {
            Obs::One
        }
    }

    pub fn value(self) -> Option<u8> {
        match self {
            Obs::Zero => Some(0),
            Obs::One => Some(1),
            Obs::Missing => None,
        }
    }

    pub fn is_missing(self) -> bool {
        self == Obs::Missing
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObsError {
    #[error(
        "observation {observed:?} impossible under the channel \
         (likelihood {lik0} for latent 0, {lik1} for latent 1 with prior {prior})"
    )]
    InconsistentObservation {
        observed: Obs,
        lik0: f64,
        lik1: f64,
        prior: f64,
    },
    #[error("{0}")]
    Autodiff(#[from] AdError),
}

/// Channel parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelMode {
    /// Only the unavailable outcome carries noise; misrepresentation is
    /// structurally impossible.
    NoMisrepresentation,
    /// Full row-stochastic 2x3 channel through row softmaxes.
    FullChannel,
}

/// Prior on the channel rows, entering the loss as a penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelPrior {
    /// Independent Beta(a, b) priors on the two missing rates.
    Beta { a: f64, b: f64 },
    /// Per-row Dirichlet over (keep, misrepresent, unavailable) mass.
    Dirichlet {
        keep: f64,
        misrepresent: f64,
        unavailable: f64,
    },
}

impl ChannelPrior {
    /// Weakly informative default that keeps rates off the boundary.
    pub fn default_beta() -> Self {
        ChannelPrior::Beta { a: 2.0, b: 2.0 }
    }
}

/// The channel entries `P(observed | latent)` as plain values.
/// `row(latent)[Obs::index(observed)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelTable {
    pub row0: [f64; 3],
    pub row1: [f64; 3],
}

impl ChannelTable {
    pub fn row(&self, latent: u8) -> &[f64; 3] {
        if latent == 0 {
            &self.row0
        } else {
            &self.row1
        }
    }

    /// Channel for a truthful label observed with a uniform missing rate.
    pub fn truthful_with_missing_rate(rate: f64) -> Self {
        ChannelTable {
            row0: [1.0 - rate, 0.0, rate],
            row1: [0.0, 1.0 - rate, rate],
        }
    }
}

/// Tape bindings of the two channel rows, each a length-3 vector.
#[derive(Debug, Clone, Copy)]
pub struct ChannelVars {
    pub row0: Var,
    pub row1: Var,
}

#[derive(Debug, Clone)]
enum RawParams {
    Rates { alpha: ParamId, beta: ParamId },
    Logits { row0: ParamId, row1: ParamId },
}

/// Recovered missing rates `(P(missing | latent = 1), P(missing | latent = 0))`,
/// annotated with the mode they were read from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveredRates {
    pub alpha: f64,
    pub beta: f64,
    pub mode: ChannelMode,
}

/// A learnable observation channel registered inside a parameter bundle.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    mode: ChannelMode,
    prior: ChannelPrior,
    raw: RawParams,
}

impl ObservationModel {
    /// Register the channel's unconstrained parameters under `prefix`.
    ///
    /// `init_rate` is the initial missing rate for both latent values
    /// (mid-range 0.3 by default elsewhere, avoiding symmetry with any
    /// ground-truth setting).
    pub fn register(
        params: &mut Parameters,
        prefix: &str,
        mode: ChannelMode,
        prior: ChannelPrior,
        init_rate: f64,
    ) -> Result<Self, AdError> {
        let raw = match mode {
            ChannelMode::NoMisrepresentation => {
                let raw_init = math::logit(init_rate);
                let alpha = params.register(
                    &format!("{prefix}.raw_alpha"),
                    Tensor::scalar(raw_init),
                )?;
                let beta = params.register(
                    &format!("{prefix}.raw_beta"),
                    Tensor::scalar(raw_init),
                )?;
                RawParams::Rates { alpha, beta }
            }
            ChannelMode::FullChannel => {
                let keep = math::ln(1.0 - init_rate - 0.05);
                let flip = math::ln(0.05);
                let miss = math::ln(init_rate);
                let row0 = params.register(
                    &format!("{prefix}.row0_logits"),
                    Tensor::vector(vec![keep, flip, miss]),
                )?;
                let row1 = params.register(
                    &format!("{prefix}.row1_logits"),
                    Tensor::vector(vec![flip, keep, miss]),
                )?;
                RawParams::Logits { row0, row1 }
            }
        };
        Ok(Self { mode, prior, raw })
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    /// Current channel entries as plain values.
    pub fn channel_table(&self, params: &Parameters) -> ChannelTable {
        match &self.raw {
            RawParams::Rates { alpha, beta } => {
                let a = math::sigmoid(params.value(*alpha).item());
                let b = math::sigmoid(params.value(*beta).item());
                ChannelTable {
                    row0: [1.0 - b, 0.0, b],
                    row1: [0.0, 1.0 - a, a],
                }
            }
            RawParams::Logits { row0, row1 } => ChannelTable {
                row0: softmax3(params.value(*row0).data()),
                row1: softmax3(params.value(*row1).data()),
            },
        }
    }

    /// Channel entry `P(observed | latent)`.
    ///
    /// Value-level read-out; the differentiable path goes through
    /// [`ObservationModel::channel_vars`].
    pub fn obs_prob(&self, params: &Parameters, observed: Obs, latent: u8) -> f64 {
        self.channel_table(params).row(latent)[observed.index()]
    }

    /// Build the channel rows on the tape, differentiable in the
    /// unconstrained parameters.
    pub fn channel_vars(&self, tape: &mut Tape, binding: &Binding) -> Result<ChannelVars, AdError> {
        match &self.raw {
            RawParams::Rates { alpha, beta } => {
                let one = tape.scalar(1.0);
                let zero = tape.scalar(0.0);
                let a = tape.sigmoid(binding.var(*alpha));
                let b = tape.sigmoid(binding.var(*beta));
                let keep0 = tape.sub(one, b)?;
                let keep1 = tape.sub(one, a)?;
                let row0 = tape.concat(&[keep0, zero, b])?;
                let row1 = tape.concat(&[zero, keep1, a])?;
                Ok(ChannelVars { row0, row1 })
            }
            RawParams::Logits { row0, row1 } => Ok(ChannelVars {
                row0: tape.softmax_last(binding.var(*row0)),
                row1: tape.softmax_last(binding.var(*row1)),
            }),
        }
    }

    /// Negative log prior density of the channel rows, added to the loss.
    pub fn prior_penalty(&self, tape: &mut Tape, binding: &Binding) -> Result<Var, AdError> {
        match (&self.raw, &self.prior) {
            (RawParams::Rates { alpha, beta }, ChannelPrior::Beta { a, b }) => {
                let norm = math::ln_multi_beta(&[*a, *b]);
                let mut acc = tape.scalar(2.0 * norm);
                for raw in [*alpha, *beta] {
                    let rate = tape.sigmoid(binding.var(raw));
                    let one = tape.scalar(1.0);
                    let comp = tape.sub(one, rate)?;
                    let lr = self.safe_ln(tape, rate)?;
                    let lc = self.safe_ln(tape, comp)?;
                    let ca = tape.scalar(a - 1.0);
                    let cb = tape.scalar(b - 1.0);
                    let ta = tape.mul(ca, lr)?;
                    let tb = tape.mul(cb, lc)?;
                    let sum = tape.add(ta, tb)?;
                    acc = tape.sub(acc, sum)?;
                }
                Ok(acc)
            }
            (RawParams::Logits { .. }, prior) => {
                let conc = match prior {
                    ChannelPrior::Dirichlet {
                        keep,
                        misrepresent,
                        unavailable,
                    } => (*keep, *misrepresent, *unavailable),
                    // A Beta prior over a full channel constrains only the
                    // unavailable mass; spread the rest uniformly.
                    ChannelPrior::Beta { a, b } => (*b / 2.0, *b / 2.0, *a),
                };
                // Concentrations in observed-index order per latent row.
                let conc_row0 = [conc.0, conc.1, conc.2];
                let conc_row1 = [conc.1, conc.0, conc.2];
                let norm0 = math::ln_multi_beta(&conc_row0);
                let norm1 = math::ln_multi_beta(&conc_row1);
                let mut acc = tape.scalar(norm0 + norm1);
                let rows = self.channel_vars(tape, binding)?;
                for (row, conc) in [(rows.row0, conc_row0), (rows.row1, conc_row1)] {
                    let lr = self.safe_ln(tape, row)?;
                    let coeff = tape.constant(Tensor::vector(vec![
                        conc[0] - 1.0,
                        conc[1] - 1.0,
                        conc[2] - 1.0,
                    ]));
                    let weighted = tape.mul(coeff, lr)?;
                    let s = tape.sum(weighted);
                    acc = tape.sub(acc, s)?;
                }
                Ok(acc)
            }
            (RawParams::Rates { .. }, ChannelPrior::Dirichlet { keep, unavailable, .. }) => {
                // Dirichlet over a no-misrepresentation channel degenerates to
                // Beta(unavailable, keep) on each rate.
                let reduced = ObservationModel {
                    mode: self.mode,
                    prior: ChannelPrior::Beta {
                        a: *unavailable,
                        b: *keep,
                    },
                    raw: self.raw.clone(),
                };
                reduced.prior_penalty(tape, binding)
            }
        }
    }

    fn safe_ln(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let clamped = tape.clamp_min(x, math::PROB_FLOOR);
        tape.ln(clamped)
    }

    /// Current missing rates `P(missing | latent)`, read from the channel.
    pub fn extract_rates(&self, params: &Parameters) -> RecoveredRates {
        let table = self.channel_table(params);
        RecoveredRates {
            alpha: table.row1[Obs::Missing.index()],
            beta: table.row0[Obs::Missing.index()],
            mode: self.mode,
        }
    }

    /// Names of the raw parameters, in (alpha-side, beta-side) order.
    pub fn param_names(&self, params: &Parameters) -> (String, String) {
        match &self.raw {
            RawParams::Rates { alpha, beta } => (
                params.get(*alpha).name().into(),
                params.get(*beta).name().into(),
            ),
            RawParams::Logits { row0, row1 } => (
                params.get(*row1).name().into(),
                params.get(*row0).name().into(),
            ),
        }
    }
}

fn softmax3(logits: &[f64]) -> [f64; 3] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| math::exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Bayes update of a binary prior through an observation channel:
/// `posterior(a) ∝ prior(a) * P(observed | a)`.
///
/// Observations with zero total likelihood under the model are rejected as
/// inconsistent; callers that iterate over records attach the record index.
pub fn condition_posterior(
    prior: &BinaryCategorical,
    table: &ChannelTable,
    observed: Obs,
) -> Result<BinaryCategorical, ObsError> {
    let lik0 = table.row0[observed.index()];
    let lik1 = table.row1[observed.index()];
    let u0 = prior.p0() * lik0;
    let u1 = prior.p1() * lik1;
    let denom = u0 + u1;
    if denom <= 0.0 {
        return Err(ObsError::InconsistentObservation {
            observed,
            lik0,
            lik1,
            prior: prior.p1(),
        });
    }
    Ok(BinaryCategorical::new(u1 / denom).expect("normalized posterior"))
}

/// Fixed-or-learnable channel for the label observation.
///
/// The default keeps a single shared missing rate fixed at the empirical
/// fraction of unavailable labels; the learnable variant reuses the full
/// channel machinery for class-conditional rates.
#[derive(Debug, Clone)]
pub enum LabelChannel {
    Fixed { missing_rate: f64 },
    Learnable(ObservationModel),
}

impl LabelChannel {
    pub fn channel_table(&self, params: &Parameters) -> ChannelTable {
        match self {
            LabelChannel::Fixed { missing_rate } => {
                ChannelTable::truthful_with_missing_rate(*missing_rate)
            }
            LabelChannel::Learnable(model) => model.channel_table(params),
        }
    }

    pub fn channel_vars(&self, tape: &mut Tape, binding: &Binding) -> Result<ChannelVars, AdError> {
        match self {
            LabelChannel::Fixed { missing_rate } => {
                let table = ChannelTable::truthful_with_missing_rate(*missing_rate);
                let row0 = tape.constant(Tensor::vector(table.row0.to_vec()));
                let row1 = tape.constant(Tensor::vector(table.row1.to_vec()));
                Ok(ChannelVars { row0, row1 })
            }
            LabelChannel::Learnable(model) => model.channel_vars(tape, binding),
        }
    }

    pub fn prior_penalty(
        &self,
        tape: &mut Tape,
        binding: &Binding,
    ) -> Result<Option<Var>, AdError> {
        match self {
            LabelChannel::Fixed { .. } => Ok(None),
            LabelChannel::Learnable(model) => model.prior_penalty(tape, binding).map(Some),
        }
    }
}
