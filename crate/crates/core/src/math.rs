//! Scalar math routed through `libm` so the crate computes identically with
//! and without `std`.

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on the clamped open interval.
#[inline]
pub fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    ln(p) - ln(1.0 - p)
}

/// Clamp a probability into `[PROB_FLOOR, 1 - PROB_FLOOR]`.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.max(PROB_FLOOR).min(1.0 - PROB_FLOOR)
}

/// Log of the multivariate Beta function `B(c) = prod(Gamma(c_k)) / Gamma(sum(c_k))`.
pub fn ln_multi_beta(concentration: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut acc = 0.0;
    for &c in concentration {
        acc += ln_gamma(c);
        sum += c;
    }
    acc - ln_gamma(sum)
}
