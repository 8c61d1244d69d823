//! Probability primitives: binary categorical and diagonal-Gaussian
//! distributions, their KL divergences, Dirichlet/Beta log densities, and
//! Gumbel machinery for the relaxed sampling used by the vanilla fairness
//! risk.
//!
//! Everything here is pure given explicit noise inputs. Probabilities are
//! clamped into `[1e-12, 1 - 1e-12]` before any logarithm; this keeps values
//! finite while perturbing results far below test tolerances.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::stream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("probability {value} outside [0, 1]")]
    InvalidProbability { value: f64 },
    #[error("degenerate prior p1 = {p1}; prior must lie strictly inside (0, 1)")]
    DegeneratePrior { p1: f64 },
    #[error("probability vector sums to {sum}, off the simplex")]
    OffSimplex { sum: f64 },
    #[error("concentration entry {index} is not positive")]
    NonPositiveConcentration { index: usize },
    #[error("non-finite entry at index {index}")]
    NonFiniteEntry { index: usize },
}

/// Distribution over `{0, 1}` parameterized by the probability of outcome 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryCategorical {
    p1: f64,
}

impl BinaryCategorical {
    pub fn new(p1: f64) -> Result<Self, DistError> {
        if !(0.0..=1.0).contains(&p1) {
            return Err(DistError::InvalidProbability { value: p1 });
        }
        Ok(Self { p1 })
    }

    pub fn p1(&self) -> f64 {
        self.p1
    }

    pub fn p0(&self) -> f64 {
        1.0 - self.p1
    }
}

/// Diagonal Gaussian parameterized by mean and log-variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, DistError> {
        if mean.len() != log_var.len() {
            return Err(DistError::DimensionMismatch {
                expected: mean.len(),
                got: log_var.len(),
            });
        }
        if let Some(index) = mean
            .iter()
            .chain(log_var.iter())
            .position(|v| !v.is_finite())
        {
            return Err(DistError::NonFiniteEntry {
                index: index % mean.len().max(1),
            });
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// Reparameterized sample `z = mean + exp(log_var / 2) * noise`.
    pub fn reparam_sample(&self, noise: &[f64]) -> Result<Vec<f64>, DistError> {
        if noise.len() != self.mean.len() {
            return Err(DistError::DimensionMismatch {
                expected: self.mean.len(),
                got: noise.len(),
            });
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((&m, &lv), &e)| m + math::exp(0.5 * lv) * e)
            .collect())
    }

    /// `KL[N(mean, diag var) || N(0, I)]`.
    pub fn kl_standard(&self) -> f64 {
        0.5 * self
            .mean
            .iter()
            .zip(&self.log_var)
            .map(|(&m, &lv)| math::exp(lv) + m * m - 1.0 - lv)
            .sum::<f64>()
    }
}

/// `KL[q || p]` for binary categoricals, with the convention `0 log 0 = 0`.
/// The prior must be non-degenerate.
pub fn kl_categorical(q: &BinaryCategorical, p: &BinaryCategorical) -> Result<f64, DistError> {
    if p.p1() <= 0.0 || p.p1() >= 1.0 {
        return Err(DistError::DegeneratePrior { p1: p.p1() });
    }
    let term = |qv: f64, pv: f64| {
        if qv == 0.0 {
            0.0
        } else {
            qv * (math::ln(math::clamp_prob(qv)) - math::ln(pv))
        }
    };
    Ok(term(q.p0(), p.p0()) + term(q.p1(), p.p1()))
}

/// Log density of the Dirichlet distribution at a point on the simplex,
/// normalizer included. Off-simplex inputs (tolerance 1e-9) are rejected.
pub fn dirichlet_log_density(probs: &[f64], concentration: &[f64]) -> Result<f64, DistError> {
    if probs.len() != concentration.len() {
        return Err(DistError::DimensionMismatch {
            expected: concentration.len(),
            got: probs.len(),
        });
    }
    if let Some(index) = concentration.iter().position(|&c| c <= 0.0) {
        return Err(DistError::NonPositiveConcentration { index });
    }
    let sum: f64 = probs.iter().sum();
    if math::abs(sum - 1.0) > 1e-9 || probs.iter().any(|&p| p < 0.0) {
        return Err(DistError::OffSimplex { sum });
    }
    let mut acc = -math::ln_multi_beta(concentration);
    for (&p, &c) in probs.iter().zip(concentration) {
        acc += (c - 1.0) * math::ln(math::clamp_prob(p));
    }
    Ok(acc)
}

/// Log density of the Beta distribution at `x`, normalizer included.
pub fn beta_log_density(x: f64, a: f64, b: f64) -> Result<f64, DistError> {
    if a <= 0.0 {
        return Err(DistError::NonPositiveConcentration { index: 0 });
    }
    if b <= 0.0 {
        return Err(DistError::NonPositiveConcentration { index: 1 });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(DistError::InvalidProbability { value: x });
    }
    let x = math::clamp_prob(x);
    Ok((a - 1.0) * math::ln(x) + (b - 1.0) * math::ln(1.0 - x) - math::ln_multi_beta(&[a, b]))
}

/// A standard Gumbel(0, 1) draw, generated as `-ln(-ln(u))` with `u` uniform
/// in the open unit interval.
pub fn standard_gumbel(rng: &mut impl rand::Rng) -> f64 {
    -math::ln(-math::ln(stream::open_unit(rng)))
}

/// Pre-drawn Gumbel noise, one `(alpha, beta)` pair per (sample, record).
/// Reproducible from its seed; i.i.d. across records and samples.
#[derive(Debug, Clone)]
pub struct GumbelNoise {
    n_records: usize,
    n_samples: usize,
    pairs: Vec<(f64, f64)>,
    seed: u64,
}

impl GumbelNoise {
    pub fn draw(n_records: usize, n_samples: usize, seed: u64) -> Self {
        let mut rng = stream::stream(seed, stream::names::GUMBEL);
        let pairs = (0..n_records * n_samples)
            .map(|_| (standard_gumbel(&mut rng), standard_gumbel(&mut rng)))
            .collect();
        Self {
            n_records,
            n_samples,
            pairs,
            seed,
        }
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pair(&self, sample: usize, record: usize) -> (f64, f64) {
        self.pairs[sample * self.n_records + record]
    }
}

/// Relaxed binary sample from the Gumbel-Softmax distribution.
///
/// `q1` at 0 or 1 is clamped rather than rejected. The result lies in (0, 1)
/// and is monotone increasing in `q1` for fixed noise and temperature.
pub fn gumbel_softmax_sample(q1: f64, noise: (f64, f64), temperature: f64) -> f64 {
    debug_assert!(temperature > 0.0);
    let q1 = math::clamp_prob(q1);
    let (alpha, beta) = noise;
    // Two-outcome softmax collapses to a logistic of the logit gap.
    math::sigmoid((math::ln(q1) + alpha - math::ln(1.0 - q1) - beta) / temperature)
}
