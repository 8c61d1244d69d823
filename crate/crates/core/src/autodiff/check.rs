//! Central finite-difference gradient checking.

use alloc::string::String;

use super::{AdError, Binding, ParamId, Parameters, Tape, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// `max over coordinates of |analytic - central| / max(1, |analytic|)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences over every parameter coordinate.
///
/// The closure must build the loss for the *current* parameter values on the
/// provided tape; any randomness it consumes has to be frozen (captured noise)
/// so that perturbed evaluations see the same stochastic inputs. Parameters
/// are restored after the check.
pub fn finite_difference_check<F>(
    params: &mut Parameters,
    step: f64,
    mut loss: F,
) -> Result<FdReport, AdError>
where
    F: FnMut(&Parameters, &mut Tape, &Binding) -> Var,
{
    assert!(step > 0.0, "finite-difference step must be positive");

    // Analytic pass.
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let out = loss(params, &mut tape, &binding);
    tape.backward(out)?;
    let analytic: alloc::vec::Vec<f64> = {
        let mut flat = alloc::vec::Vec::with_capacity(params.coordinate_count());
        for i in 0..params.len() {
            let g = tape.grad_or_zeros(binding.var(ParamId(i)));
            flat.extend_from_slice(g.data());
        }
        flat
    };

    let eval = |params: &Parameters, loss: &mut F| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let out = loss(params, &mut tape, &binding);
        Ok(tape.value(out).item())
    };

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for coord in 0..params.coordinate_count() {
        let original = params.coordinate(coord);

        params.set_coordinate(coord, original + step);
        let plus = eval(params, &mut loss)?;
        params.set_coordinate(coord, original - step);
        let minus = eval(params, &mut loss)?;
        params.set_coordinate(coord, original);

        if !plus.is_finite() || !minus.is_finite() {
            let (name, index) = params.coordinate_name(coord);
            return Err(AdError::NonFinite { name, index });
        }

        let central = (plus - minus) / (2.0 * step);
        let a = analytic[coord];
        let rel = (a - central).abs() / a.abs().max(1.0);
        if rel > report.max_rel_err {
            let (name, index) = params.coordinate_name(coord);
            report.max_rel_err = rel;
            report.worst_param = name;
            report.worst_index = index;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut params = Parameters::new();
        let id = params.register("x", Tensor::scalar(1.0)).unwrap();
        let report = finite_difference_check(&mut params, 1e-5, |_, tape, binding| {
            let x = binding.var(id);
            tape.mul(x, x).unwrap()
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-8, "err = {}", report.max_rel_err);
    }

    #[test]
    fn non_finite_evaluation_names_the_coordinate() {
        let mut params = Parameters::new();
        let id = params.register("p", Tensor::scalar(1e-6)).unwrap();
        // exp(1/p) overflows to infinity for small positive p.
        let err = finite_difference_check(&mut params, 1e-5, |_, tape, binding| {
            let x = binding.var(id);
            let one = tape.scalar(1.0);
            let inv = tape.div(one, x).unwrap();
            tape.exp(inv)
        })
        .unwrap_err();
        match err {
            AdError::NonFinite { name, index } => {
                assert_eq!(name, "p");
                assert_eq!(index, 0);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
