//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing the tape gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Denominator floor for relative errors. Gradients that are exactly zero by
/// symmetry (a key bias under softmax, a DC offset under a zero-mean loss)
/// come back from central differences as rounding noise near 1e-9; below the
/// floor the comparison is effectively absolute.
pub const GRAD_FLOOR: f64 = 1e-5;

/// Largest `|a - n| / max(|a|, |n|, GRAD_FLOOR)` over all elements.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every element `i`.
pub fn central_difference(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite difference probe"));
        }
        *slot = (plus - minus) / (2.0 * eps);
    }
    Ok(Tensor::new_unchecked(x.shape().to_vec(), out))
}

/// Evaluates a scalar tape function on a fresh tape.
fn eval_scalar<F>(f: &F, x: &Tensor, requires_grad: bool) -> Result<(f64, Option<Tensor>)>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let v = tape.leaf(x.clone(), requires_grad);
    let out = f(&tape, v)?;
    let value = out.value();
    if value.numel() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got {:?}",
            value.shape()
        )));
    }
    let y = value.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("gradient check objective"));
    }
    if !requires_grad {
        return Ok((y, None));
    }
    let grads = tape.backward(out)?;
    let g = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((y, Some(g)))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn finite_diff_grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let (_, analytic) = eval_scalar(&f, x, true)?;
    let analytic = analytic.expect("requested gradient");
    let numeric = central_difference(|p| Ok(eval_scalar(&f, p, false)?.0), x, eps)?;
    Ok(GradCheck {
        max_rel_error: max_rel_error(&analytic, &numeric),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let check = finite_diff_grad_check(|_, v| v.mul(v)?.sum(), &x, 1e-5).unwrap();
        assert!((check.analytic.item() - 6.0).abs() < 1e-12);
        assert!((check.analytic.item() - check.numeric.item()).abs() < 1e-6);
    }

    #[test]
    fn injected_fault_is_reported() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        let check = finite_diff_grad_check(|_, v| v.mul(v)?.sum(), &x, 1e-5).unwrap();
        let err = max_rel_error(&check.analytic.scale(1.01), &check.numeric);
        // |1.01 - 1| / 1.01
        assert!((err - 0.01 / 1.01).abs() < 1e-8, "{err}");
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::zeros(&[1]);
        let check = finite_diff_grad_check(|_, v| v.sigmoid()?.sum(), &x, 1e-5).unwrap();
        assert!((check.analytic.item() - 0.25).abs() < 1e-15);
        assert!(check.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::full(&[1], 1e300);
        assert!(finite_diff_grad_check(|_, v| v.mul(v)?.sum(), &x, 1e-5).is_err());
    }
}
