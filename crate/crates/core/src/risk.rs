//! Differentiable fairness risks over missing-value posteriors.
//!
//! The empirical metrics (mean difference of positive rates, equal
//! opportunity, difference of equalized odds) are differentiable in the
//! predicted positive probabilities. The fairness risk is their expectation
//! over the posterior distributions of unavailable group and label values;
//! it is estimated by Monte Carlo with a proven `O(C^2 / eps^2 * log(1/delta))`
//! sample complexity, and verified here against an exact enumeration oracle
//! on small instances.
//!
//! The Monte Carlo estimator treats the sampling posteriors as constants
//! (stop-gradient): its gradient flows only into the predictions. The
//! "vanilla" variant instead differentiates through the sampling
//! distributions with the straight-through Gumbel-Softmax relaxation; it
//! exists for ablation against the recused estimator.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::dist::GumbelNoise;
use crate::math;
use crate::obs::Obs;
use crate::stream;

/// Maximum number of missing values the exact oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{count} missing values exceed the enumeration limit {limit}")]
    TooManyMissing { count: usize, limit: usize },
    #[error("invalid {what}: {value}")]
    InvalidArgument { what: &'static str, value: f64 },
    #[error("{0}")]
    Autodiff(#[from] AdError),
}

/// Group-fairness metric choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FairnessMetric {
    /// Difference of equalized odds: the sum over both classes of the
    /// absolute group gap in positive rates. Bounded by 2.
    Deo,
    /// Absolute mean difference of positive rates across groups (demographic
    /// parity gap). Bounded by 1.
    MeanDifference,
    /// The mean-difference gap restricted to the positive class. Bounded by 1.
    EqualOpportunity,
}

impl FairnessMetric {
    /// Upper bound `C` on the metric value, as used by the sample-size bound.
    pub fn bound(self) -> f64 {
        match self {
            FairnessMetric::Deo => 2.0,
            FairnessMetric::MeanDifference | FairnessMetric::EqualOpportunity => 1.0,
        }
    }
}

/// Identity of a group-class cell, used by empty-cell warnings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellId {
    pub group: u8,
    /// `None` for metrics that do not condition on the class.
    pub class: Option<u8>,
}

/// Value, gradient with respect to the predictions, and empty-cell warnings
/// of one empirical metric evaluation.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub empty_cells: Vec<CellId>,
}

fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One absolute-gap term between the two group cells, optionally restricted
/// to records of one class. An empty cell zeroes the term and is reported.
fn gap_term(
    predictions: &[f64],
    groups: &[u8],
    labels: &[u8],
    class: Option<u8>,
    grad: &mut [f64],
    empty: &mut Vec<CellId>,
) -> f64 {
    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    for i in 0..predictions.len() {
        if class.is_some_and(|c| labels[i] != c) {
            continue;
        }
        let g = usize::from(groups[i] != 0);
        sum[g] += predictions[i];
        count[g] += 1;
    }
    let mut any_empty = false;
    for g in 0..2u8 {
        if count[usize::from(g)] == 0 {
            empty.push(CellId { group: g, class });
            any_empty = true;
        }
    }
    if any_empty {
        return 0.0;
    }
    let mean0 = sum[0] / count[0] as f64;
    let mean1 = sum[1] / count[1] as f64;
    let sign = sign_zero(mean0 - mean1);
    if sign != 0.0 {
        for i in 0..predictions.len() {
            if class.is_some_and(|c| labels[i] != c) {
                continue;
            }
            if groups[i] == 0 {
                grad[i] += sign / count[0] as f64;
            } else {
                grad[i] -= sign / count[1] as f64;
            }
        }
    }
    math::abs(mean0 - mean1)
}

/// Evaluate a fairness metric on committed group and label assignments.
///
/// `predictions` are the per-record positive probabilities; the result is
/// differentiable in them through [`MetricEval::grad`].
pub fn eval_metric(
    predictions: &[f64],
    labels: &[u8],
    groups: &[u8],
    metric: FairnessMetric,
) -> MetricEval {
    debug_assert_eq!(predictions.len(), labels.len());
    debug_assert_eq!(predictions.len(), groups.len());
    let mut grad = vec![0.0; predictions.len()];
    let mut empty_cells = Vec::new();
    let value = match metric {
        FairnessMetric::MeanDifference => {
            gap_term(predictions, groups, labels, None, &mut grad, &mut empty_cells)
        }
        FairnessMetric::EqualOpportunity => {
            gap_term(predictions, groups, labels, Some(1), &mut grad, &mut empty_cells)
        }
        FairnessMetric::Deo => {
            gap_term(predictions, groups, labels, Some(0), &mut grad, &mut empty_cells)
                + gap_term(predictions, groups, labels, Some(1), &mut grad, &mut empty_cells)
        }
    };
    MetricEval {
        value,
        grad,
        empty_cells,
    }
}

/// Record the empirical metric on the tape, differentiable in `predictions`.
pub fn empirical_metric(
    tape: &mut Tape,
    predictions: Var,
    labels: &[u8],
    groups: &[u8],
    metric: FairnessMetric,
) -> Result<(Var, Vec<CellId>), RiskError> {
    let p = tape.value(predictions).data();
    if p.len() != labels.len() || p.len() != groups.len() {
        return Err(RiskError::LengthMismatch {
            what: "empirical_metric assignments",
            expected: p.len(),
            got: labels.len().min(groups.len()),
        });
    }
    let eval = eval_metric(p, labels, groups, metric);
    let var = tape.scalar_with_grad(predictions, eval.value, eval.grad)?;
    Ok((var, eval.empty_cells))
}

/// Per-record sampling state of one unavailable value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosteriorState {
    /// Observed (or otherwise clamped) value; never sampled.
    Committed(u8),
    /// Unavailable value with its posterior probability of being 1.
    Random(f64),
}

impl PosteriorState {
    pub fn p1(self) -> f64 {
        match self {
            PosteriorState::Committed(v) => f64::from(v),
            PosteriorState::Random(p) => p,
        }
    }

    pub fn is_random(self) -> bool {
        matches!(self, PosteriorState::Random(_))
    }
}

/// Per-record posteriors of the unavailable group and label values.
///
/// These are plain values: callers take them from stop-gradient reads of the
/// encoder posteriors and the label imputer, so sampling from them cannot
/// backpropagate.
#[derive(Debug, Clone)]
pub struct MissingnessPosteriors {
    group: Vec<PosteriorState>,
    label: Vec<PosteriorState>,
}

impl MissingnessPosteriors {
    pub fn new(
        group: Vec<PosteriorState>,
        label: Vec<PosteriorState>,
    ) -> Result<Self, RiskError> {
        if group.len() != label.len() {
            return Err(RiskError::LengthMismatch {
                what: "posterior vectors",
                expected: group.len(),
                got: label.len(),
            });
        }
        for state in group.iter().chain(label.iter()) {
            if let PosteriorState::Random(p) = state {
                if !(0.0..=1.0).contains(p) {
                    return Err(RiskError::InvalidArgument {
                        what: "posterior probability",
                        value: *p,
                    });
                }
            }
        }
        Ok(Self { group, label })
    }

    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    pub fn group(&self) -> &[PosteriorState] {
        &self.group
    }

    pub fn label(&self) -> &[PosteriorState] {
        &self.label
    }

    pub fn missing_count(&self) -> usize {
        self.group
            .iter()
            .chain(self.label.iter())
            .filter(|s| s.is_random())
            .count()
    }
}

/// Monte Carlo configuration for the fairness risk.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Gumbel-Softmax temperature; consumed only by the vanilla risk.
    pub temperature: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            seed: 0,
            temperature: 0.5,
        }
    }
}

/// Joint assignments of every record's group and label, one row per sample.
#[derive(Debug, Clone)]
pub struct JointAssignments {
    n_records: usize,
    groups: Vec<u8>,
    labels: Vec<u8>,
}

impl JointAssignments {
    pub fn n_samples(&self) -> usize {
        if self.n_records == 0 {
            0
        } else {
            self.groups.len() / self.n_records
        }
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn groups(&self, sample: usize) -> &[u8] {
        &self.groups[sample * self.n_records..(sample + 1) * self.n_records]
    }

    pub fn labels(&self, sample: usize) -> &[u8] {
        &self.labels[sample * self.n_records..(sample + 1) * self.n_records]
    }
}

/// Draw `n_samples` iid joint assignments; committed records are clamped,
/// never sampled.
pub fn draw_assignments(
    posteriors: &MissingnessPosteriors,
    n_samples: usize,
    rng: &mut impl rand::Rng,
) -> JointAssignments {
    let n = posteriors.len();
    let mut groups = Vec::with_capacity(n * n_samples);
    let mut labels = Vec::with_capacity(n * n_samples);
    for _ in 0..n_samples {
        for s in &posteriors.group {
            groups.push(match s {
                PosteriorState::Committed(v) => *v,
                PosteriorState::Random(p) => u8::from(rng.random::<f64>() < *p),
            });
        }
        for s in &posteriors.label {
            labels.push(match s {
                PosteriorState::Committed(v) => *v,
                PosteriorState::Random(p) => u8::from(rng.random::<f64>() < *p),
            });
        }
    }
    JointAssignments {
        n_records: n,
        groups,
        labels,
    }
}

/// Monte Carlo fairness-risk estimate recorded on the tape.
#[derive(Debug, Clone)]
pub struct RiskEval {
    pub risk: Var,
    /// Number of (sample, term) events where an empty group-class cell
    /// contributed zero.
    pub empty_cell_events: usize,
}

/// Average the metric over pre-drawn assignments; gradient flows only into
/// `predictions`.
pub fn risk_with_assignments(
    tape: &mut Tape,
    predictions: Var,
    assignments: &JointAssignments,
    metric: FairnessMetric,
) -> Result<RiskEval, RiskError> {
    let p = tape.value(predictions).data().to_vec();
    if p.len() != assignments.n_records() {
        return Err(RiskError::LengthMismatch {
            what: "predictions vs assignments",
            expected: assignments.n_records(),
            got: p.len(),
        });
    }
    let n_samples = assignments.n_samples().max(1);
    let mut value = 0.0;
    let mut coeff = vec![0.0; p.len()];
    let mut empty_cell_events = 0;
    for s in 0..assignments.n_samples() {
        let eval = eval_metric(&p, assignments.labels(s), assignments.groups(s), metric);
        value += eval.value;
        for (c, g) in coeff.iter_mut().zip(&eval.grad) {
            *c += g;
        }
        empty_cell_events += eval.empty_cells.len();
    }
    let scale = 1.0 / n_samples as f64;
    value *= scale;
    for c in coeff.iter_mut() {
        *c *= scale;
    }
    let risk = tape.scalar_with_grad(predictions, value, coeff)?;
    Ok(RiskEval {
        risk,
        empty_cell_events,
    })
}

/// The Monte Carlo fairness risk: draw `cfg.n_samples` joint assignments of
/// all unavailable values from the (stop-gradient) posteriors and average the
/// metric over them.
///
/// Differentiable in `predictions` only; the gradient with respect to any
/// parameter behind `posteriors` is exactly zero because sampling sees plain
/// values.
pub fn mc_fairness_risk(
    tape: &mut Tape,
    predictions: Var,
    posteriors: &MissingnessPosteriors,
    metric: FairnessMetric,
    cfg: &McConfig,
) -> Result<RiskEval, RiskError> {
    if cfg.n_samples == 0 {
        return Err(RiskError::InvalidArgument {
            what: "n_samples",
            value: 0.0,
        });
    }
    let mut rng = stream::stream(cfg.seed, stream::names::MC);
    let assignments = draw_assignments(posteriors, cfg.n_samples, &mut rng);
    risk_with_assignments(tape, predictions, &assignments, metric)
}

/// Value-only Monte Carlo estimate (no tape), for harnesses and evaluation.
pub fn mc_estimate_value(
    posteriors: &MissingnessPosteriors,
    predictions: &[f64],
    metric: FairnessMetric,
    n_samples: usize,
    rng: &mut impl rand::Rng,
) -> f64 {
    let assignments = draw_assignments(posteriors, n_samples, rng);
    let mut acc = 0.0;
    for s in 0..n_samples {
        acc += eval_metric(predictions, assignments.labels(s), assignments.groups(s), metric).value;
    }
    acc / n_samples as f64
}

/// Exact expectation of the metric by enumerating every joint assignment of
/// the unavailable values, weighted by its product probability.
pub fn exact_risk_bruteforce(
    posteriors: &MissingnessPosteriors,
    predictions: &[f64],
    metric: FairnessMetric,
) -> Result<f64, RiskError> {
    if predictions.len() != posteriors.len() {
        return Err(RiskError::LengthMismatch {
            what: "predictions vs posteriors",
            expected: posteriors.len(),
            got: predictions.len(),
        });
    }
    let missing = posteriors.missing_count();
    if missing > BRUTE_FORCE_LIMIT {
        return Err(RiskError::TooManyMissing {
            count: missing,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    let n = posteriors.len();
    let mut groups = vec![0u8; n];
    let mut labels = vec![0u8; n];
    // One slot per missing value: groups first, then labels.
    let mut slots: Vec<(bool, usize, f64)> = Vec::with_capacity(missing);
    for (i, s) in posteriors.group.iter().enumerate() {
        match s {
            PosteriorState::Committed(v) => groups[i] = *v,
            PosteriorState::Random(p) => slots.push((true, i, *p)),
        }
    }
    for (i, s) in posteriors.label.iter().enumerate() {
        match s {
            PosteriorState::Committed(v) => labels[i] = *v,
            PosteriorState::Random(p) => slots.push((false, i, *p)),
        }
    }

    let mut expectation = 0.0;
    for mask in 0u32..(1u32 << slots.len()) {
        let mut weight = 1.0;
        for (bit, &(is_group, idx, p)) in slots.iter().enumerate() {
            let one = (mask >> bit) & 1 == 1;
            weight *= if one { p } else { 1.0 - p };
            if is_group {
                groups[idx] = u8::from(one);
            } else {
                labels[idx] = u8::from(one);
            }
        }
        if weight == 0.0 {
            continue;
        }
        expectation += weight * eval_metric(predictions, &labels, &groups, metric).value;
    }
    Ok(expectation)
}

/// Samples sufficient for an `epsilon`-accurate estimate with confidence
/// `1 - delta` of a metric bounded by `c`: `ceil(c^2 / (2 eps^2) * ln(2/delta))`,
/// the two-sided form of the concentration bound, at least 1.
pub fn required_sample_size(c: f64, epsilon: f64, delta: f64) -> Result<usize, RiskError> {
    if c <= 0.0 || !c.is_finite() {
        return Err(RiskError::InvalidArgument { what: "bound C", value: c });
    }
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(RiskError::InvalidArgument {
            what: "epsilon",
            value: epsilon,
        });
    }
    if !(0.0 < delta && delta < 1.0) {
        return Err(RiskError::InvalidArgument {
            what: "delta",
            value: delta,
        });
    }
    let raw = c * c / (2.0 * epsilon * epsilon) * math::ln(2.0 / delta);
    Ok((math::ceil(raw) as usize).max(1))
}

/// Two-sided concentration bound `P(|estimate - exact| >= eps) <= 2 exp(-2 N eps^2 / C^2)`.
pub fn concentration_bound(c: f64, epsilon: f64, n_samples: usize) -> f64 {
    2.0 * math::exp(-2.0 * n_samples as f64 * epsilon * epsilon / (c * c))
}

/// Empirical check of the concentration bound.
#[derive(Debug, Clone, Copy)]
pub struct HarnessReport {
    pub n_samples: usize,
    pub epsilon: f64,
    /// Analytic two-sided bound at this `n_samples`.
    pub bound: f64,
    /// Fraction of repetitions whose estimate deviated from the exact
    /// expectation by more than `epsilon`.
    pub empirical_rate: f64,
    pub exact: f64,
}

/// Run repeated independent Monte Carlo estimates at the sample size implied
/// by `(C, epsilon, delta)` and report how often they miss the exact value
/// by more than `epsilon`.
pub fn concentration_harness(
    posteriors: &MissingnessPosteriors,
    predictions: &[f64],
    metric: FairnessMetric,
    epsilon: f64,
    delta: f64,
    repetitions: usize,
    seed: u64,
) -> Result<HarnessReport, RiskError> {
    let n_samples = required_sample_size(metric.bound(), epsilon, delta)?;
    concentration_harness_at(
        posteriors,
        predictions,
        metric,
        epsilon,
        n_samples,
        repetitions,
        seed,
    )
}

/// As [`concentration_harness`], but with the sample count fixed directly.
pub fn concentration_harness_at(
    posteriors: &MissingnessPosteriors,
    predictions: &[f64],
    metric: FairnessMetric,
    epsilon: f64,
    n_samples: usize,
    repetitions: usize,
    seed: u64,
) -> Result<HarnessReport, RiskError> {
    if repetitions == 0 {
        return Err(RiskError::InvalidArgument {
            what: "repetitions",
            value: 0.0,
        });
    }
    let exact = exact_risk_bruteforce(posteriors, predictions, metric)?;
    let mut violations = 0usize;
    for rep in 0..repetitions {
        let mut rng = stream::substream(seed, stream::names::MC, rep as u64);
        let estimate = mc_estimate_value(posteriors, predictions, metric, n_samples, &mut rng);
        if math::abs(estimate - exact) > epsilon {
            violations += 1;
        }
    }
    Ok(HarnessReport {
        n_samples,
        epsilon,
        bound: concentration_bound(metric.bound(), epsilon, n_samples),
        empirical_rate: violations as f64 / repetitions as f64,
        exact,
    })
}

/// How the vanilla risk turns relaxed samples into memberships.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GumbelMode {
    /// Hard memberships in the forward pass, soft backward (the training
    /// ablation).
    StraightThrough,
    /// Fully soft memberships; the forward value is then differentiable
    /// end to end, which is what finite-difference checks require.
    Soft,
}

/// The vanilla fairness risk: the same expectation as [`mc_fairness_risk`]
/// but sampled through the Gumbel-Softmax relaxation, so the result is also
/// differentiable in the sampling posteriors. Used by the ablation only.
///
/// `post_label` / `post_group` are the on-tape posterior probabilities of
/// value 1 per record; observed records (per `label_obs` / `group_obs`) are
/// clamped to their observations and never sampled.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_fairness_risk(
    tape: &mut Tape,
    predictions: Var,
    post_label: Var,
    post_group: Var,
    label_obs: &[Obs],
    group_obs: &[Obs],
    metric: FairnessMetric,
    noise: &GumbelNoise,
    cfg: &McConfig,
    mode: GumbelMode,
) -> Result<RiskEval, RiskError> {
    let n = tape.value(predictions).len();
    if tape.value(post_label).len() != n
        || tape.value(post_group).len() != n
        || label_obs.len() != n
        || group_obs.len() != n
    {
        return Err(RiskError::LengthMismatch {
            what: "vanilla risk inputs",
            expected: n,
            got: label_obs.len().min(group_obs.len()),
        });
    }
    if noise.n_records() != n || noise.n_samples() < cfg.n_samples {
        return Err(RiskError::LengthMismatch {
            what: "gumbel noise",
            expected: n * cfg.n_samples,
            got: noise.n_records() * noise.n_samples(),
        });
    }

    let mut empty_cell_events = 0usize;
    let mut acc: Option<Var> = None;
    for s in 0..cfg.n_samples {
        let label_s = relaxed_sample(tape, post_label, label_obs, noise, s, cfg.temperature, mode)?;
        let group_s = relaxed_sample(tape, post_group, group_obs, noise, s, cfg.temperature, mode)?;
        let (f_s, empties) = metric_on_tape(tape, predictions, label_s, group_s, metric)?;
        empty_cell_events += empties;
        acc = Some(match acc {
            Some(a) => tape.add(a, f_s)?,
            None => f_s,
        });
    }
    let total = acc.expect("n_samples >= 1");
    let scale = tape.scalar(1.0 / cfg.n_samples as f64);
    let risk = tape.mul(total, scale)?;
    Ok(RiskEval {
        risk,
        empty_cell_events,
    })
}

/// One relaxed joint sample: observed records keep their values as
/// constants, unavailable ones come from the Gumbel-Softmax of the posterior.
fn relaxed_sample(
    tape: &mut Tape,
    posterior: Var,
    observed: &[Obs],
    noise: &GumbelNoise,
    sample: usize,
    temperature: f64,
    mode: GumbelMode,
) -> Result<Var, AdError> {
    let n = observed.len();
    let mut committed = vec![0.0; n];
    let mut missing_mask = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; n];
    for (i, obs) in observed.iter().enumerate() {
        match obs.value() {
            Some(v) => committed[i] = f64::from(v),
            None => {
                missing_mask[i] = 1.0;
                let (a, b) = noise.pair(sample, i);
                alpha[i] = a;
                beta[i] = b;
            }
        }
    }

    let clamped = tape.clamp_min(posterior, math::PROB_FLOOR);
    let one = tape.scalar(1.0);
    let comp = tape.sub(one, posterior)?;
    let comp = tape.clamp_min(comp, math::PROB_FLOOR);
    let lq = tape.ln(clamped)?;
    let lcomp = tape.ln(comp)?;
    let gap = tape.sub(lq, lcomp)?;
    let noise_gap = tape.constant(Tensor::vector(
        alpha.iter().zip(&beta).map(|(a, b)| a - b).collect(),
    ));
    let shifted = tape.add(gap, noise_gap)?;
    let inv_t = tape.scalar(1.0 / temperature);
    let scaled = tape.mul(shifted, inv_t)?;
    let soft = tape.sigmoid(scaled);
    let sampled = match mode {
        GumbelMode::StraightThrough => tape.straight_through_round(soft),
        GumbelMode::Soft => soft,
    };
    let mask = tape.constant(Tensor::vector(missing_mask));
    let masked = tape.mul(mask, sampled)?;
    let committed = tape.constant(Tensor::vector(committed));
    tape.add(committed, masked)
}

/// The metric as a tape expression over membership vectors, so gradients
/// reach both the predictions and the (relaxed) memberships.
fn metric_on_tape(
    tape: &mut Tape,
    predictions: Var,
    labels: Var,
    groups: Var,
    metric: FairnessMetric,
) -> Result<(Var, usize), RiskError> {
    let one = tape.scalar(1.0);
    let group0 = tape.sub(one, groups)?;
    let label0 = tape.sub(one, labels)?;

    let mut empty = 0usize;
    let value = match metric {
        FairnessMetric::MeanDifference => {
            gap_term_on_tape(tape, predictions, group0, groups, &mut empty)?
        }
        FairnessMetric::EqualOpportunity => {
            let w0 = tape.mul(group0, labels)?;
            let w1 = tape.mul(groups, labels)?;
            gap_term_on_tape(tape, predictions, w0, w1, &mut empty)?
        }
        FairnessMetric::Deo => {
            let w0c0 = tape.mul(group0, label0)?;
            let w1c0 = tape.mul(groups, label0)?;
            let t0 = gap_term_on_tape(tape, predictions, w0c0, w1c0, &mut empty)?;
            let w0c1 = tape.mul(group0, labels)?;
            let w1c1 = tape.mul(groups, labels)?;
            let t1 = gap_term_on_tape(tape, predictions, w0c1, w1c1, &mut empty)?;
            tape.add(t0, t1)?
        }
    };
    Ok((value, empty))
}

fn gap_term_on_tape(
    tape: &mut Tape,
    predictions: Var,
    weights0: Var,
    weights1: Var,
    empty: &mut usize,
) -> Result<Var, RiskError> {
    // A cell counts as empty when its realized membership rounds to nothing.
    let occupancy = |tape: &Tape, w: Var| {
        tape.value(w).data().iter().filter(|&&v| v >= 0.5).count()
    };
    let occ0 = occupancy(tape, weights0);
    let occ1 = occupancy(tape, weights1);
    if occ0 == 0 || occ1 == 0 {
        if occ0 == 0 {
            *empty += 1;
        }
        if occ1 == 0 {
            *empty += 1;
        }
        return Ok(tape.scalar(0.0));
    }
    let mean_of = |tape: &mut Tape, w: Var| -> Result<Var, RiskError> {
        let weighted = tape.mul(w, predictions)?;
        let num = tape.sum(weighted);
        let den = tape.sum(w);
        Ok(tape.div(num, den)?)
    };
    let m0 = mean_of(tape, weights0)?;
    let m1 = mean_of(tape, weights1)?;
    let diff = tape.sub(m0, m1)?;
    Ok(tape.abs(diff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn deo_hand_enumeration_with_empty_cell() {
        // p=[1,0,1,1], y=[1,1,1,0], a=[0,0,1,1]:
        // class 1: a=0 mean 0.5, a=1 mean 1 -> |0.5-1| = 0.5;
        // class 0: a=0 cell empty -> 0 with warning.
        let eval = eval_metric(
            &[1.0, 0.0, 1.0, 1.0],
            &[1, 1, 1, 0],
            &[0, 0, 1, 1],
            FairnessMetric::Deo,
        );
        assert_relative_eq!(eval.value, 0.5, epsilon = 1e-12);
        assert_eq!(
            eval.empty_cells,
            vec![CellId {
                group: 0,
                class: Some(0)
            }]
        );
    }

    #[test]
    fn mean_difference_known_values() {
        let eval = eval_metric(
            &[0.2, 0.4, 0.6, 0.8],
            &[0, 0, 0, 0],
            &[0, 0, 1, 1],
            FairnessMetric::MeanDifference,
        );
        assert_relative_eq!(eval.value, 0.4, epsilon = 1e-12);
        assert!(eval.empty_cells.is_empty());

        let eval = eval_metric(
            &[0.7, 0.7, 0.7, 0.7],
            &[0, 1, 0, 1],
            &[0, 0, 1, 1],
            FairnessMetric::MeanDifference,
        );
        assert_eq!(eval.value, 0.0);
    }

    #[test]
    fn metric_gradient_matches_finite_differences() {
        let mut rng = crate::stream::stream(17, "metric-fd");
        for metric in [
            FairnessMetric::Deo,
            FairnessMetric::MeanDifference,
            FairnessMetric::EqualOpportunity,
        ] {
            let n = 12;
            let p: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let labels: Vec<u8> = (0..n)
                .map(|_| u8::from(rand::Rng::random::<bool>(&mut rng)))
                .collect();
            let groups: Vec<u8> = (0..n)
                .map(|_| u8::from(rand::Rng::random::<bool>(&mut rng)))
                .collect();
            let eval = eval_metric(&p, &labels, &groups, metric);
            let step = 1e-6;
            for i in 0..n {
                let mut plus = p.clone();
                plus[i] += step;
                let mut minus = p.clone();
                minus[i] -= step;
                let fd = (eval_metric(&plus, &labels, &groups, metric).value
                    - eval_metric(&minus, &labels, &groups, metric).value)
                    / (2.0 * step);
                assert!(
                    (fd - eval.grad[i]).abs() <= 1e-6,
                    "{metric:?} coord {i}: fd {fd} vs analytic {}",
                    eval.grad[i]
                );
            }
        }
    }

    #[test]
    fn empirical_metric_is_differentiable_on_tape() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.2, 0.8, 0.5, 0.7]));
        let (metric, empties) = empirical_metric(
            &mut tape,
            p,
            &[1, 1, 1, 1],
            &[0, 0, 1, 1],
            FairnessMetric::MeanDifference,
        )
        .unwrap();
        assert!(empties.is_empty());
        tape.backward(metric).unwrap();
        // a=0 mean 0.5 < a=1 mean 0.6: d|m0-m1|/dp = [-1/2, -1/2, +1/2, +1/2].
        assert_eq!(tape.grad(p).unwrap(), &[-0.5, -0.5, 0.5, 0.5]);
    }

    #[test]
    fn degenerate_posteriors_make_the_estimator_exact() {
        let posteriors = MissingnessPosteriors::new(
            vec![
                PosteriorState::Committed(0),
                PosteriorState::Random(1.0),
                PosteriorState::Committed(1),
            ],
            vec![
                PosteriorState::Random(0.0),
                PosteriorState::Committed(1),
                PosteriorState::Committed(1),
            ],
        )
        .unwrap();
        let p = [0.9, 0.2, 0.6];
        let committed = eval_metric(&p, &[0, 1, 1], &[0, 1, 1], FairnessMetric::Deo).value;
        for n_samples in [1, 7, 100] {
            let mut tape = Tape::new();
            let pv = tape.leaf(Tensor::vector(p.to_vec()));
            let eval = mc_fairness_risk(
                &mut tape,
                pv,
                &posteriors,
                FairnessMetric::Deo,
                &McConfig {
                    n_samples,
                    seed: 3,
                    temperature: 0.5,
                },
            )
            .unwrap();
            assert_relative_eq!(tape.value(eval.risk).item(), committed, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_record_enumeration_matches_hand_value() {
        // p=[1,0], group posteriors [Random(0.5), Committed(1)], labels all
        // observed: exact = 0.5*|1-0| + 0.5*0 (empty a=0 cell) = 0.5.
        let posteriors = MissingnessPosteriors::new(
            vec![PosteriorState::Random(0.5), PosteriorState::Committed(1)],
            vec![PosteriorState::Committed(1), PosteriorState::Committed(1)],
        )
        .unwrap();
        let p = [1.0, 0.0];
        let exact =
            exact_risk_bruteforce(&posteriors, &p, FairnessMetric::MeanDifference).unwrap();
        assert_relative_eq!(exact, 0.5, epsilon = 1e-12);

        let mut rng = crate::stream::stream(11, "mc-agree");
        let estimate = mc_estimate_value(
            &posteriors,
            &p,
            FairnessMetric::MeanDifference,
            100_000,
            &mut rng,
        );
        assert!((estimate - exact).abs() <= 0.01);
    }

    #[test]
    fn bruteforce_equals_empirical_with_no_missing_values() {
        let posteriors = MissingnessPosteriors::new(
            vec![PosteriorState::Committed(0), PosteriorState::Committed(1)],
            vec![PosteriorState::Committed(1), PosteriorState::Committed(0)],
        )
        .unwrap();
        let p = [0.3, 0.8];
        let exact = exact_risk_bruteforce(&posteriors, &p, FairnessMetric::Deo).unwrap();
        let direct = eval_metric(&p, &[1, 0], &[0, 1], FairnessMetric::Deo).value;
        assert_eq!(exact, direct);
    }

    #[test]
    fn bruteforce_is_additive_over_independent_blocks() {
        // Class-0 block is records {0,1}, class-1 block is {2,3}; DEO is the
        // sum of the two block gaps and the blocks share no cells, so the
        // expectation decomposes by linearity.
        let posteriors = MissingnessPosteriors::new(
            vec![
                PosteriorState::Random(0.3),
                PosteriorState::Committed(1),
                PosteriorState::Random(0.7),
                PosteriorState::Committed(0),
            ],
            vec![
                PosteriorState::Committed(0),
                PosteriorState::Committed(0),
                PosteriorState::Committed(1),
                PosteriorState::Committed(1),
            ],
        )
        .unwrap();
        let p = [0.2, 0.9, 0.5, 0.4];
        let full = exact_risk_bruteforce(&posteriors, &p, FairnessMetric::Deo).unwrap();

        let block0 = MissingnessPosteriors::new(
            vec![PosteriorState::Random(0.3), PosteriorState::Committed(1)],
            vec![PosteriorState::Committed(0), PosteriorState::Committed(0)],
        )
        .unwrap();
        let block1 = MissingnessPosteriors::new(
            vec![PosteriorState::Random(0.7), PosteriorState::Committed(0)],
            vec![PosteriorState::Committed(1), PosteriorState::Committed(1)],
        )
        .unwrap();
        let e0 = exact_risk_bruteforce(&block0, &p[..2], FairnessMetric::Deo).unwrap();
        let e1 = exact_risk_bruteforce(&block1, &p[2..], FairnessMetric::Deo).unwrap();
        assert_relative_eq!(full, e0 + e1, epsilon = 1e-12);
    }

    #[test]
    fn bruteforce_rejects_too_many_missing() {
        let n = BRUTE_FORCE_LIMIT + 1;
        let posteriors = MissingnessPosteriors::new(
            vec![PosteriorState::Random(0.5); n],
            vec![PosteriorState::Committed(1); n],
        )
        .unwrap();
        let p = vec![0.5; n];
        let err = exact_risk_bruteforce(&posteriors, &p, FairnessMetric::Deo).unwrap_err();
        assert!(matches!(err, RiskError::TooManyMissing { count, .. } if count == n));
    }

    #[test]
    fn sample_size_formula_known_values() {
        // C=1, eps=0.1, delta=0.05: ceil(ln(40) / 0.02) = 185.
        assert_eq!(required_sample_size(1.0, 0.1, 0.05).unwrap(), 185);
        // C=1, eps=0.05, delta=0.05: ceil(ln(40) / 0.005) = 738.
        assert_eq!(required_sample_size(1.0, 0.05, 0.05).unwrap(), 738);
        // Vanishing C needs a single sample.
        assert_eq!(required_sample_size(1e-9, 0.1, 0.05).unwrap(), 1);
        // Total cost n*N for C=1, eps=0.01, n=1e4 is on the order of 1e8.
        let n_samples = required_sample_size(1.0, 0.01, 0.05).unwrap() as f64;
        let total = 1e4 * n_samples;
        assert!((1e8..1e9).contains(&total), "total cost {total}");
        assert!(required_sample_size(0.0, 0.1, 0.05).is_err());
        assert!(required_sample_size(1.0, 0.0, 0.05).is_err());
        assert!(required_sample_size(1.0, 0.1, 1.0).is_err());
    }

    #[test]
    fn deterministic_posteriors_never_violate() {
        let posteriors = MissingnessPosteriors::new(
            vec![PosteriorState::Committed(0), PosteriorState::Committed(1)],
            vec![PosteriorState::Committed(1), PosteriorState::Committed(1)],
        )
        .unwrap();
        let report = concentration_harness(
            &posteriors,
            &[0.4, 0.9],
            FairnessMetric::MeanDifference,
            0.05,
            0.05,
            50,
            7,
        )
        .unwrap();
        assert_eq!(report.empirical_rate, 0.0);
        assert_eq!(report.n_samples, 738);
    }

    #[test]
    fn vanilla_risk_matches_mc_risk_on_degenerate_posteriors() {
        let n = 4;
        let obs_groups = [Obs::Zero, Obs::One, Obs::Missing, Obs::Missing];
        let obs_labels = [Obs::One, Obs::Missing, Obs::One, Obs::Zero];
        // Degenerate (to-be-clamped) posteriors for the missing ones.
        let group_post = vec![0.0, 1.0, 1.0, 0.0];
        let label_post = vec![1.0, 0.0, 1.0, 0.0];
        let p = vec![0.8, 0.3, 0.6, 0.5];

        let posteriors = MissingnessPosteriors::new(
            obs_groups
                .iter()
                .enumerate()
                .map(|(i, o)| match o.value() {
                    Some(v) => PosteriorState::Committed(v),
                    None => PosteriorState::Random(group_post[i]),
                })
                .collect(),
            obs_labels
                .iter()
                .enumerate()
                .map(|(i, o)| match o.value() {
                    Some(v) => PosteriorState::Committed(v),
                    None => PosteriorState::Random(label_post[i]),
                })
                .collect(),
        )
        .unwrap();

        let cfg = McConfig {
            n_samples: 16,
            seed: 5,
            temperature: 0.1,
        };
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::vector(p.clone()));
        let mc = mc_fairness_risk(&mut tape, pv, &posteriors, FairnessMetric::Deo, &cfg).unwrap();
        let mc_value = tape.value(mc.risk).item();

        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::vector(p));
        let lv = tape.leaf(Tensor::vector(label_post));
        let gv = tape.leaf(Tensor::vector(group_post));
        let noise = GumbelNoise::draw(n, cfg.n_samples, 5);
        let vr = vanilla_fairness_risk(
            &mut tape,
            pv,
            lv,
            gv,
            &obs_labels,
            &obs_groups,
            FairnessMetric::Deo,
            &noise,
            &cfg,
            GumbelMode::StraightThrough,
        )
        .unwrap();
        let vanilla_value = tape.value(vr.risk).item();
        assert!((mc_value - vanilla_value).abs() <= 1e-6);
    }

    #[test]
    fn vanilla_risk_gradient_reaches_the_sampling_posteriors() {
        let obs_groups = [Obs::Missing, Obs::Missing, Obs::One, Obs::Zero];
        let obs_labels = [Obs::One, Obs::One, Obs::Zero, Obs::One];
        let mut tape = Tape::new();
        let pv = tape.leaf(Tensor::vector(vec![0.8, 0.3, 0.6, 0.5]));
        let lv = tape.leaf(Tensor::vector(vec![1.0, 1.0, 0.0, 1.0]));
        let gv = tape.leaf(Tensor::vector(vec![0.45, 0.55, 1.0, 0.0]));
        let cfg = McConfig {
            n_samples: 32,
            seed: 9,
            temperature: 0.5,
        };
        let noise = GumbelNoise::draw(4, cfg.n_samples, 9);
        let vr = vanilla_fairness_risk(
            &mut tape,
            pv,
            lv,
            gv,
            &obs_labels,
            &obs_groups,
            FairnessMetric::Deo,
            &noise,
            &cfg,
            GumbelMode::StraightThrough,
        )
        .unwrap();
        tape.backward(vr.risk).unwrap();
        let group_grad = tape.grad(gv).unwrap();
        assert!(
            group_grad.iter().any(|&g| g != 0.0),
            "expected a nonzero gradient into the group posterior, got {group_grad:?}"
        );
        // Observed records stay clamped: their posterior entries get zero.
        assert_eq!(group_grad[2], 0.0);
        assert_eq!(group_grad[3], 0.0);
    }

    #[test]
    fn vanilla_soft_mode_passes_finite_difference_check() {
        use crate::autodiff::{finite_difference_check, Parameters};
        let obs_groups = [Obs::Missing, Obs::One, Obs::Missing, Obs::Zero];
        let obs_labels = [Obs::One, Obs::Missing, Obs::One, Obs::One];
        let cfg = McConfig {
            n_samples: 8,
            seed: 23,
            temperature: 0.7,
        };
        let noise = GumbelNoise::draw(4, cfg.n_samples, 23);

        let mut params = Parameters::new();
        let p_id = params
            .register("predictions", Tensor::vector(vec![0.8, 0.3, 0.6, 0.5]))
            .unwrap();
        let l_id = params
            .register("label_post", Tensor::vector(vec![1.0, 0.62, 1.0, 1.0]))
            .unwrap();
        let g_id = params
            .register("group_post", Tensor::vector(vec![0.45, 1.0, 0.55, 0.0]))
            .unwrap();

        let report = finite_difference_check(&mut params, 1e-5, |_, tape, binding| {
            vanilla_fairness_risk(
                tape,
                binding.var(p_id),
                binding.var(l_id),
                binding.var(g_id),
                &obs_labels,
                &obs_groups,
                FairnessMetric::Deo,
                &noise,
                &cfg,
                GumbelMode::Soft,
            )
            .unwrap()
            .risk
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "rel err {}", report.max_rel_err);
    }
}
