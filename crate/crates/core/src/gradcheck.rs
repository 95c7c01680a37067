//! Central finite-difference verification of tape gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, Tape, Tensor, Var};

/// Default relative step: each element is perturbed by `h·max(1, |x|)`.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// max over elements of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// Element where `max_rel_err` was attained.
    pub worst_index: usize,
}

/// Gradient of the scalar `f(x)` taken from the tape.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    Ok(tape.grad(xv).cloned().unwrap_or_else(|| x.zeros_like()))
}

/// Central-difference gradient of the scalar `f(x)`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::usage(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(point);
        let out = f(&mut tape, xv)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::domain("grad_check", "non-finite function value"));
        }
        Ok(v)
    };
    let mut grad = Vec::with_capacity(x.numel());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let xi = x.values()[i];
        let step = h * xi.abs().max(1.0);
        probe.values_mut()[i] = xi + step;
        let up = eval(probe.clone())?;
        probe.values_mut()[i] = xi - step;
        let down = eval(probe.clone())?;
        probe.values_mut()[i] = xi;
        grad.push((up - down) / (2.0 * step));
    }
    Tensor::from_shape(x.shape().clone(), grad)
}

/// Compares tape and central-difference gradients of `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let numeric = numeric_gradient(&f, x, h)?;
    let analytic = analytic_gradient(&f, x)?;
    if !analytic.is_finite() {
        return Err(Error::domain("grad_check", "non-finite analytic gradient"));
    }
    let (worst_index, max_rel_err) = analytic
        .values()
        .iter()
        .zip(numeric.values())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_err,
        worst_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([1], vec![3.0]).unwrap();
        let r = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum_all(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, _x| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.analytic.values().iter().all(|&g| g == 0.0));
        assert!(r.numeric.values().iter().all(|&g| g == 0.0));
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| t.square(x), &x, 0.0).is_err());
    }

    #[test]
    fn non_finite_values_are_domain_errors() {
        let x = Tensor::scalar(800.0);
        let r = grad_check(|t, x| t.exp(x), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Domain { .. })));
    }
}
