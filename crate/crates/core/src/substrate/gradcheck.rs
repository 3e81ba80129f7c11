//! Central-difference gradient checking.
//!
//! Errors are measured element-wise and normalized by the larger infinity
//! norm of the analytic and numeric gradients of the checked tensor
//! (a normwise relative error). This keeps near-zero entries from
//! reporting round-off as huge relative error while still scaling with the
//! gradient's magnitude.

use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Below this gradient norm the relative error falls back to absolute.
const NORM_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest magnitude among both gradients; the denominator of `max_rel_err`.
    pub scale: f64,
}

impl GradReport {
    /// Compares an analytic gradient with its numeric estimate.
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        assert!(!analytic.is_empty());
        let norm = analytic
            .iter()
            .chain(numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let denom = if norm > NORM_FLOOR { norm } else { 1.0 };
        let mut worst = 0;
        let mut max_abs = -1.0;
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let e = (a - n).abs();
            if e > max_abs {
                max_abs = e;
                worst = i;
            }
        }
        Self {
            max_abs_err: max_abs,
            max_rel_err: max_abs / denom,
            worst_index: worst,
            analytic: analytic[worst],
            numeric: numeric[worst],
            scale: norm,
        }
    }

    /// Normwise error of several checked tensors taken as one vector.
    pub fn combine<'a>(reports: impl IntoIterator<Item = &'a GradReport>) -> Option<Self> {
        let mut worst: Option<Self> = None;
        let mut scale = 0.0f64;
        for r in reports {
            scale = scale.max(r.scale);
            if worst.as_ref().is_none_or(|w| r.max_abs_err > w.max_abs_err) {
                worst = Some(r.clone());
            }
        }
        worst.map(|mut w| {
            w.scale = scale;
            w.max_rel_err = w.max_abs_err / if scale > NORM_FLOOR { scale } else { 1.0 };
            w
        })
    }
}

/// Checks `f` at `x`: `f` builds a scalar from the tracked input on the
/// given tape.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Harness(format!("eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&tape, xv)?;
    let base = tape.value(loss).item();
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.to_f64())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&tape, v)?;
        Ok(tape.value(out).item())
    };
    let again = eval(x)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Harness(format!(
            "function is not deterministic: {base:e} then {again:e}"
        )));
    }

    let mut numeric = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * eps);
    }
    Ok(GradReport::compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_f64(&[5], &[0.3, -1.2, 2.0, 0.01, -0.7]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let z = t.scale(v, 0.0)?;
                let s = t.sum(z)?;
                t.add_scalar(s, 4.0)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.analytic.abs() < 1e-12 && r.numeric.abs() < 1e-12);
        assert!(r.max_rel_err < 1e-12);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let err = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let s = t.sum(v)?;
                t.add_scalar(s, calls.get())
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Harness(_)));
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
