//! Training loop, evaluation, model selection, softened thresholding, and
//! test-time risk labeling.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::AdamHyper;
use crate::data::{ScoredView, TrainView};
use crate::math;
use crate::risk::{
    self, eval_metric, FairnessMetric, McConfig, MissingnessPosteriors, PosteriorState,
};
use crate::ssvae::{ModelError, SsVaeModel};
use crate::stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("training requires a non-empty dataset")]
    EmptyDataset,
    #[error("training requires at least one observed label")]
    NoObservedLabels,
    #[error("invalid {what}: {value}")]
    InvalidConfig { what: &'static str, value: f64 },
    #[error("evaluation requires a non-empty scored dataset")]
    EmptyEvaluation,
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Risk(#[from] risk::RiskError),
    #[error("{0}")]
    Autodiff(#[from] crate::autodiff::AdError),
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Fairness weight; 0 trains the plain SS-VAE.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Monte Carlo sample count for the fairness risk.
    pub mc_samples: usize,
    /// Gumbel-Softmax temperature (vanilla risk only).
    pub temperature: f64,
    pub metric: FairnessMetric,
    /// Weight of the imputer cross-entropy auxiliary loss.
    pub imputer_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 128,
            mc_samples: 100,
            temperature: 0.5,
            metric: FairnessMetric::Deo,
            imputer_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (what, value, strict) in [
            ("lambda", self.lambda, false),
            ("learning_rate", self.learning_rate, true),
            ("epochs", self.epochs as f64, true),
            ("batch_size", self.batch_size as f64, true),
            ("mc_samples", self.mc_samples as f64, true),
            ("temperature", self.temperature, true),
            ("imputer_weight", self.imputer_weight, false),
        ] {
            if value < 0.0 || value.is_nan() || (strict && value == 0.0) {
                return Err(TrainError::InvalidConfig { what, value });
            }
        }
        Ok(())
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total step loss over the epoch.
    pub loss: f64,
    /// Mean per-record ELBO over the epoch.
    pub elbo: f64,
    /// Mean Monte Carlo fairness risk over the epoch; absent at lambda = 0.
    pub fairness_risk: Option<f64>,
    /// Accuracy of hard class predictions against the observed labels.
    pub train_accuracy: f64,
    /// Fairness metric on the validation split against hidden truth.
    pub val_fairness: Option<f64>,
    /// Empty group-class cell warnings accumulated this epoch.
    pub empty_cell_events: usize,
}

/// Minimize the fairness-regularized objective with bias-corrected adaptive
/// moments over shuffled mini-batches.
///
/// The channel prior penalty is scaled by `batch / n_train` per step so each
/// epoch applies it once in dataset units; the imputer cross-entropy joins
/// with `imputer_weight`. Returns the per-epoch curve. Training is
/// deterministic given (seed, data, config).
pub fn train(
    model: &mut SsVaeModel,
    view: &TrainView<'_>,
    validation: Option<&ScoredView<'_>>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, TrainError> {
    cfg.validate()?;
    let n = view.n_records();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if !view.label_obs.iter().any(|o| !o.is_missing()) {
        return Err(TrainError::NoObservedLabels);
    }

    let hyper = AdamHyper {
        learning_rate: cfg.learning_rate,
        ..AdamHyper::default()
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = stream::substream(cfg.seed, stream::names::SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut loss_acc = 0.0;
        let mut elbo_acc = 0.0;
        let mut risk_acc = 0.0;
        let mut risk_steps = 0usize;
        let mut empty_cells = 0usize;
        let mut batches = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let batch = view.batch(chunk);
            let mut z_rng = stream::substream(cfg.seed, stream::names::LATENT, step);
            let z_noise = model.draw_latent_noise(batch.n_records(), &mut z_rng);
            let mc = McConfig {
                n_samples: cfg.mc_samples,
                seed: stream::substream_seed(cfg.seed, stream::names::MC, step),
                temperature: cfg.temperature,
            };
            let omega_scale = batch.n_records() as f64 / n as f64;

            let mut tape = crate::autodiff::Tape::new();
            let binding = model.params.bind(&mut tape);
            let fair = model.fair_objective_scaled(
                &mut tape,
                &binding,
                &batch,
                &z_noise,
                cfg.lambda,
                cfg.metric,
                &mc,
                omega_scale,
            )?;
            let mut total = fair.total;
            if cfg.imputer_weight > 0.0 {
                if let Some(ce) = model.imputer_cross_entropy(&mut tape, &fair.fp, &batch)? {
                    let w = tape.scalar(cfg.imputer_weight);
                    let weighted = tape.mul(ce, w)?;
                    total = tape.add(total, weighted)?;
                }
            }

            let loss_value = tape.value(total).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            tape.backward(total)?;
            model.params.adam_step(&tape, &binding, &hyper, step);

            loss_acc += loss_value;
            elbo_acc += tape.value(fair.elbo.per_record).data().iter().sum::<f64>()
                / batch.n_records() as f64;
            if let Some(risk) = &fair.risk {
                risk_acc += tape.value(risk.risk).item();
                risk_steps += 1;
                empty_cells += risk.empty_cell_events;
            }
            batches += 1;
        }

        let train_accuracy = observed_label_accuracy(model, view)?;
        let val_fairness = match validation {
            Some(scored) => Some(evaluate(model, scored, cfg.metric)?.fairness),
            None => None,
        };
        curve.push(EpochStats {
            epoch,
            loss: loss_acc / batches as f64,
            elbo: elbo_acc / batches as f64,
            fairness_risk: (risk_steps > 0).then(|| risk_acc / risk_steps as f64),
            train_accuracy,
            val_fairness,
            empty_cell_events: empty_cells,
        });
    }
    Ok(curve)
}

/// Positive-class probabilities of the classifier head (no access to
/// observations).
pub fn predict_proba(model: &SsVaeModel, features: &crate::autodiff::Tensor) -> Result<Vec<f64>, ModelError> {
    Ok(model.head_values(features)?.class_probs)
}

/// Hard label at threshold 0.5, ties to 1.
pub fn hard_label(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Accuracy of hard predictions against the observed labels of the training
/// view (records with unavailable labels are skipped).
fn observed_label_accuracy(
    model: &SsVaeModel,
    view: &TrainView<'_>,
) -> Result<f64, TrainError> {
    let probs = predict_proba(model, view.features)?;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for (p, o) in probs.iter().zip(view.label_obs) {
        if let Some(v) = o.value() {
            seen += 1;
            correct += usize::from(hard_label(*p) == v);
        }
    }
    Ok(if seen == 0 {
        0.0
    } else {
        correct as f64 / seen as f64
    })
}

/// Evaluation scores on held-out data with hidden ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// The fairness metric computed from hard (rounded) predictions.
    pub fairness: f64,
    pub empty_cells: usize,
}

/// Score accuracy and the fairness metric of hard predictions against the
/// hidden ground truth.
pub fn evaluate(
    model: &SsVaeModel,
    scored: &ScoredView<'_>,
    metric: FairnessMetric,
) -> Result<EvalReport, TrainError> {
    if scored.n_records() == 0 {
        return Err(TrainError::EmptyEvaluation);
    }
    let probs = predict_proba(model, scored.features)?;
    let hard: Vec<f64> = probs.iter().map(|&p| f64::from(hard_label(p))).collect();
    let correct = hard
        .iter()
        .zip(scored.labels)
        .filter(|(&h, &y)| h as u8 == y)
        .count();
    let eval = eval_metric(&hard, scored.labels, scored.groups, metric);
    Ok(EvalReport {
        accuracy: correct as f64 / scored.n_records() as f64,
        fairness: eval.value,
        empty_cells: eval.empty_cells.len(),
    })
}

/// Model-selection protocol: sweep a validation-fairness threshold upward
/// until a candidate clears both the threshold and the training-accuracy
/// floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionProtocol {
    pub initial_threshold: f64,
    pub threshold_step: f64,
    /// Required fraction of the fairness-unaware reference accuracy.
    pub accuracy_floor_ratio: f64,
}

impl Default for SelectionProtocol {
    fn default() -> Self {
        Self {
            initial_threshold: 0.01,
            threshold_step: 0.01,
            accuracy_floor_ratio: 0.97,
        }
    }
}

/// One trained candidate in the selection grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub lambda: f64,
    pub val_fairness: f64,
    pub train_accuracy: f64,
}

/// Pick the candidate with validation fairness below the rising threshold
/// that meets the accuracy floor; highest training accuracy breaks ties,
/// then smallest lambda. Returns the index into `candidates`.
pub fn select_model(
    candidates: &[Candidate],
    protocol: &SelectionProtocol,
    reference_accuracy: f64,
) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let floor = protocol.accuracy_floor_ratio * reference_accuracy;
    let max_fairness = candidates
        .iter()
        .map(|c| c.val_fairness)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut threshold = protocol.initial_threshold;
    loop {
        let best = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.val_fairness < threshold && c.train_accuracy >= floor)
            .max_by(|(_, x), (_, y)| {
                x.train_accuracy
                    .partial_cmp(&y.train_accuracy)
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(
                        y.lambda
                            .partial_cmp(&x.lambda)
                            .unwrap_or(core::cmp::Ordering::Equal),
                    )
            });
        if let Some((index, _)) = best {
            return Some(index);
        }
        if threshold > max_fairness {
            // No candidate ever meets the floor: fall back to the highest
            // training accuracy overall so the protocol terminates.
            return candidates
                .iter()
                .enumerate()
                .max_by(|(_, x), (_, y)| {
                    x.train_accuracy
                        .partial_cmp(&y.train_accuracy)
                        .unwrap_or(core::cmp::Ordering::Equal)
                })
                .map(|(index, _)| index);
        }
        threshold += protocol.threshold_step;
    }
}

/// Soften a hard threshold on a probability: `sigma((logit(f) - tau) / T)`.
/// Group-specific thresholds are a caller-side choice of `tau`.
pub fn soften_threshold(f: f64, tau: f64, temperature: f64) -> f64 {
    debug_assert!(temperature > 0.0);
    math::sigmoid((math::logit(f) - tau) / temperature)
}

/// Configuration for test-time risk labeling.
#[derive(Debug, Clone, Copy)]
pub struct RiskLabelingConfig {
    pub metric: FairnessMetric,
    pub mc_samples: usize,
    pub seed: u64,
    /// Number of candidate thresholds per group in the tuning grid.
    pub threshold_grid: usize,
    /// Tune group-specific thresholds before coordinate descent. Disabling
    /// this leaves the rounding initialization to the descent alone.
    pub tune_thresholds: bool,
}

impl Default for RiskLabelingConfig {
    fn default() -> Self {
        Self {
            metric: FairnessMetric::Deo,
            mc_samples: 100,
            seed: 0,
            threshold_grid: 21,
            tune_thresholds: true,
        }
    }
}

/// Outcome of test-time risk labeling.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLabelingOutcome {
    pub labels: Vec<u8>,
    /// Label flips performed by coordinate descent (excluding threshold
    /// tuning).
    pub flips: usize,
    pub passes: usize,
    pub objective: f64,
}

/// Joint negative log-likelihood plus expected-fairness objective over a
/// candidate hard labeling, with the fairness expectation over frozen Monte
/// Carlo draws of the unavailable groups.
fn labeling_objective(
    class_probs: &[f64],
    labels: &[u8],
    group_draws: &[Vec<u8>],
    metric: FairnessMetric,
) -> f64 {
    let n = labels.len() as f64;
    let mut nll = 0.0;
    for (p, &y) in class_probs.iter().zip(labels) {
        let q = if y == 1 { *p } else { 1.0 - *p };
        nll -= math::ln(math::clamp_prob(q));
    }
    nll /= n;
    let mut risk = 0.0;
    for groups in group_draws {
        risk += eval_metric(class_probs, labels, groups, metric).value;
    }
    nll + risk / group_draws.len() as f64
}

/// Label a test set by minimizing classification plus expected fairness
/// risk: round the class probabilities, tune group-specific logit
/// thresholds, then coordinate-descend over labels until a full pass makes
/// no flip.
///
/// `group_posteriors` carries the per-record group states (committed where
/// observed, posterior probabilities where unavailable).
pub fn risk_labeling(
    class_probs: &[f64],
    group_posteriors: &[PosteriorState],
    cfg: &RiskLabelingConfig,
) -> Result<RiskLabelingOutcome, TrainError> {
    if class_probs.is_empty() || class_probs.len() != group_posteriors.len() {
        return Err(TrainError::EmptyEvaluation);
    }
    let n = class_probs.len();

    // Frozen Monte Carlo draws of the unavailable groups: the objective must
    // stay fixed during descent so it can only decrease.
    let posteriors = MissingnessPosteriors::new(
        group_posteriors.to_vec(),
        vec![PosteriorState::Committed(0); n],
    )?;
    let mut rng = stream::stream(cfg.seed, stream::names::MC);
    let assignments = risk::draw_assignments(&posteriors, cfg.mc_samples.max(1), &mut rng);
    let group_draws: Vec<Vec<u8>> = (0..assignments.n_samples())
        .map(|s| assignments.groups(s).to_vec())
        .collect();

    // Initialize by rounding.
    let mut labels: Vec<u8> = class_probs.iter().map(|&p| hard_label(p)).collect();
    let mut objective = labeling_objective(class_probs, &labels, &group_draws, cfg.metric);

    // Tune group-specific logit thresholds on a quantile grid; the hard
    // group assignment for thresholding is the posterior argmax.
    if cfg.tune_thresholds {
        let hard_groups: Vec<u8> = group_posteriors
            .iter()
            .map(|s| hard_label(s.p1()))
            .collect();
        let logits: Vec<f64> = class_probs.iter().map(|&p| math::logit(p)).collect();
        let grid = threshold_grid(&logits, cfg.threshold_grid);
        for &tau0 in &grid {
            for &tau1 in &grid {
                let cand: Vec<u8> = logits
                    .iter()
                    .zip(&hard_groups)
                    .map(|(&l, &g)| u8::from(l > if g == 1 { tau1 } else { tau0 }))
                    .collect();
                let value = labeling_objective(class_probs, &cand, &group_draws, cfg.metric);
                if value < objective {
                    objective = value;
                    labels = cand;
                }
            }
        }
    }

    // Coordinate descent: flip any label that lowers the objective.
    let mut flips = 0usize;
    let mut passes = 0usize;
    loop {
        passes += 1;
        let mut changed = false;
        for i in 0..n {
            labels[i] ^= 1;
            let value = labeling_objective(class_probs, &labels, &group_draws, cfg.metric);
            if value < objective {
                objective = value;
                flips += 1;
                changed = true;
            } else {
                labels[i] ^= 1;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(RiskLabelingOutcome {
        labels,
        flips,
        passes,
        objective,
    })
}

/// Candidate thresholds: logit quantiles bracketed by sentinels so that
/// all-0 and all-1 labelings are reachable. The rounding initialization
/// (threshold 0) is always included.
fn threshold_grid(logits: &[f64], points: usize) -> Vec<f64> {
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let mut grid = vec![f64::NEG_INFINITY, 0.0, f64::INFINITY];
    let points = points.max(2);
    for k in 0..points {
        let pos = (k as f64 / (points - 1) as f64) * (sorted.len() - 1) as f64;
        let idx = pos as usize;
        // Midpoint between neighboring logits separates the two records.
        let value = if idx + 1 < sorted.len() {
            0.5 * (sorted[idx] + sorted[idx + 1])
        } else {
            sorted[idx] + 1.0
        };
        grid.push(value);
    }
    grid
}

/// Model-level wrapper of [`risk_labeling`]: the test view has no access to
/// observations, so every group is unavailable and comes from the encoder
/// posterior.
pub fn test_time_risk_labeling(
    model: &SsVaeModel,
    features: &crate::autodiff::Tensor,
    cfg: &RiskLabelingConfig,
) -> Result<RiskLabelingOutcome, TrainError> {
    let heads = model.head_values(features)?;
    let states: Vec<PosteriorState> = heads
        .group_posterior_missing
        .iter()
        .map(|&p| PosteriorState::Random(p.clamp(0.0, 1.0)))
        .collect();
    risk_labeling(&heads.class_probs, &states, cfg)
}
