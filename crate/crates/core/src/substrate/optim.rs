//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// First/second moment buffers for exactly the trainable parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> Self {
        let moments = params
            .into_iter()
            .map(|(name, shape)| {
                (
                    name.to_string(),
                    Moments {
                        m: Tensor::zeros(shape),
                        v: Tensor::zeros(shape),
                    },
                )
            })
            .collect();
        Self { step: 0, moments }
    }
}

/// One parameter update request.
pub struct ParamUpdate<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

impl AdamW {
    /// Applies one step to every parameter in `updates`, which must cover
    /// the state's parameter set exactly. Decay is applied to the weights
    /// directly (`w ← w·(1 − lr·wd)`), then the bias-corrected Adam step.
    pub fn step<T: Scalar>(
        &self,
        state: &mut OptimizerState<T>,
        lr: f64,
        updates: Vec<ParamUpdate<'_, T>>,
    ) -> Result<()> {
        if updates.len() != state.moments.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, update covers {}",
                state.moments.len(),
                updates.len()
            )));
        }
        for u in &updates {
            let mom = state
                .moments
                .get(u.name)
                .ok_or_else(|| Error::Usage(format!("no optimizer state for `{}`", u.name)))?;
            if u.param.shape() != u.grad.shape() {
                return Err(Error::dim("adamw_step", u.param.shape(), u.grad.shape()));
            }
            if mom.m.shape() != u.param.shape() {
                return Err(Error::dim("adamw_step", u.param.shape(), mom.m.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        for u in updates {
            let mom = state.moments.get_mut(u.name).expect("validated above");
            let w = u.param.data_mut();
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for i in 0..w.len() {
                let g = u.grad.data()[i];
                w[i] = w[i] * decay;
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                w[i] = w[i] - step_size * m[i] / (v[i].sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64, g: f64, opt: AdamW, lr: f64) -> f64 {
        let mut p = Tensor::from_f64(&[1], &[w]).unwrap();
        let grad = Tensor::from_f64(&[1], &[g]).unwrap();
        let mut st = OptimizerState::<f64>::new([("w", &[1usize][..])]);
        opt.step(
            &mut st,
            lr,
            vec![ParamUpdate {
                name: "w",
                param: &mut p,
                grad: &grad,
            }],
        )
        .unwrap();
        assert_eq!(st.step, 1);
        p.data()[0]
    }

    #[test]
    fn decoupled_decay_with_zero_grad() {
        let w = one_param(1.0, 0.0, AdamW::default(), 2e-3);
        assert!((w - 0.99998).abs() < 1e-15, "{w}");
    }

    #[test]
    fn zero_decay_zero_grad_is_fixed_point() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        assert_eq!(one_param(0.75, 0.0, opt, 2e-3), 0.75);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for &g in &[3.0, -0.02, 1e-3] {
            let w = one_param(0.5, g, opt, 2e-3);
            let expect = 0.5 - 2e-3 * f64::signum(g);
            assert!((w - expect).abs() < 1e-7, "g={g} w={w}");
        }
    }

    #[test]
    fn rejects_mismatched_grad() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = OptimizerState::<f64>::new([("w", &[2usize][..])]);
        let err = AdamW::default()
            .step(
                &mut st,
                1e-3,
                vec![ParamUpdate {
                    name: "w",
                    param: &mut p,
                    grad: &g,
                }],
            )
            .unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sum_sq().sqrt() - 1.0).abs() < 1e-12);
    }
}
