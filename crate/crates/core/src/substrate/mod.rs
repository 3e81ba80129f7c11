//! Tensor arithmetic, reverse-mode differentiation and the numeric
//! plumbing (gradient checking, AdamW, tensor files, seeded RNG) that the
//! model is built on.

pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod wtns;

pub use gradcheck::{grad_check, GradReport};
pub use kernels::PadMode;
pub use optim::{clip_global_norm, AdamW, Moments, OptimizerState, ParamUpdate};
pub use tape::{AttnMask, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        assert_eq!(tape.value(tape.matmul(a, id).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(tape.matmul(a, ones).unwrap()).data(), &[3.0, 7.0]);
        assert!(tape
            .value(tape.matmul(zero, a).unwrap())
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn batched_matmul_broadcasts_rank2_rhs() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), vec![2, 1, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        assert_eq!(tape.value(tape.softmax(x).unwrap()).data(), &[0.5, 0.5]);
        let y = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.value(tape.softmax(y).unwrap());
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let a = tape.constant(t(&[3], &[0.1, -2.0, 0.7]));
        let b = tape.constant(t(&[3], &[1000.1, 998.0, 1000.7]));
        let (sa, sb) = (tape.value(tape.softmax(a).unwrap()), tape.value(tape.softmax(b).unwrap()));
        for (x, y) in sa.data().iter().zip(sb.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, id, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ones = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, ones, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
        // Patch-sized stride on a constant image gives a constant grid.
        let c = tape.constant(Tensor::full(&[3, 8, 8], 0.25));
        let k = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.5));
        let g = tape.value(tape.conv2d(c, k, 4, 0, PadMode::Zero).unwrap());
        assert_eq!(g.shape(), &[2, 2, 2]);
        assert!(g.data().iter().all(|&v| v == g.data()[0]));
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 0, PadMode::Zero).is_err());
        assert!(tape.conv2d(x, k, 0, 1, PadMode::Zero).is_err());
        assert!(tape.conv2d(x, k, 1, 1, PadMode::Zero).is_ok());
    }

    #[test]
    fn resize_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
        let y = tape.value(tape.resize(x, 3, 3).unwrap());
        assert_eq!(y.data(), &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
        let c = tape.constant(Tensor::full(&[2, 3, 5], 1.7));
        let yc = tape.value(tape.resize(c, 7, 2).unwrap());
        assert!(yc.data().iter().all(|&v| v == 1.7));
        let r: Vec<f64> = (0..12).map(|i| (i as f64 * 0.77).sin()).collect();
        let xr = tape.constant(t(&[1, 3, 4], &r));
        assert_eq!(tape.value(tape.resize(xr, 3, 4).unwrap()).data(), &r[..]);
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[1.0, 5.0, -2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, -2.0]));
        let frozen = tape.constant(t(&[2], &[3.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let y = tape.add(y, frozen).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0]);
        assert!(tape.grad(frozen).is_none());
        // Accumulates additively until reset.
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, -8.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.var(t(&[1], &[1000.0]));
        assert!(matches!(tape.exp(x), Err(crate::Error::NonFinite { .. })));
        let z = tape.var(t(&[1], &[0.0]));
        assert!(tape.ln(z).is_err());
    }
}
