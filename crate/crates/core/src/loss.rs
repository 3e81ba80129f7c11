//! Scale-invariant log loss (on the tape) and the evaluation metric suite
//! (plain `f64`).

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Scalar, Tape, Tensor, Var};

/// Loss weight used for training.
pub const TRAIN_LAMBDA: f64 = 0.5;

pub const THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

/// `mean(d²) − λ·mean(d)²` with `d = ln pred − ln gt` over valid pixels.
pub fn si_loss<T: Scalar>(tape: &Tape<T>, pred: Var, gt: &Tensor<T>, valid: &[bool], lambda: f64) -> Result<Var> {
    let n = tape.value(pred).numel();
    if gt.numel() != n || valid.len() != n {
        return Err(Error::dim("si_loss", &tape.shape(pred), gt.shape()));
    }
    let idx: Vec<usize> = (0..n).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::Evaluation("no valid pixels".into()));
    }
    let mut log_gt = Vec::with_capacity(idx.len());
    for &i in &idx {
        let g = gt.data()[i];
        if g <= T::zero() {
            return Err(Error::Numeric(format!("non-positive ground truth {:e} at pixel {i}", g.f64())));
        }
        log_gt.push(g.ln());
    }
    let k = idx.len();
    let p = tape.gather(pred, Arc::new(idx))?;
    let lp = tape.ln(p)?;
    let lg = tape.constant(Tensor::new(&[k], log_gt)?);
    let d = tape.sub(lp, lg)?;
    let sq = tape.mul(d, d)?;
    let msq = tape.mean(sq)?;
    let md = tape.mean(d)?;
    let md2 = tape.mul(md, md)?;
    let pen = tape.scale(md2, T::of(lambda))?;
    tape.sub(msq, pen)
}

/// Plain-number version of [`si_loss`], used for reporting.
pub fn si_value(pred: &[f64], gt: &[f64], lambda: f64) -> f64 {
    let n = pred.len() as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = p.ln() - g.ln();
        s += d;
        s2 += d * d;
    }
    s2 / n - lambda * (s / n) * (s / n)
}

/// Evaluation window: pixels with ground truth above `cap` are dropped and
/// predictions are clamped into `[min, cap]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalWindow {
    pub min: f64,
    pub cap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixel_count: u64,
}

pub fn compute_metrics(pred: &[f64], gt: &[f64], valid: &[bool], window: EvalWindow) -> Result<MetricsReport> {
    if pred.len() != gt.len() || valid.len() != gt.len() {
        return Err(Error::dim("compute_metrics", &[pred.len()], &[gt.len()]));
    }
    let mut p = Vec::new();
    let mut g = Vec::new();
    for i in 0..gt.len() {
        if valid[i] && gt[i] > 0.0 && gt[i] <= window.cap {
            p.push(pred[i].clamp(window.min, window.cap));
            g.push(gt[i]);
        }
    }
    if g.is_empty() {
        return Err(Error::Evaluation(format!(
            "no valid pixels at or below the {} m cap",
            window.cap
        )));
    }
    let n = g.len() as f64;
    let mut r = MetricsReport {
        valid_pixel_count: g.len() as u64,
        ..MetricsReport::default()
    };
    let mut se = 0.0;
    let mut sle = 0.0;
    let mut hits = [0usize; 3];
    for (&p, &g) in p.iter().zip(&g) {
        let e = p - g;
        r.abs_rel += e.abs() / g;
        r.sq_rel += e * e / g;
        se += e * e;
        let le = p.ln() - g.ln();
        sle += le * le;
        r.log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (h, &t) in hits.iter_mut().zip(&THRESHOLDS) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    r.abs_rel /= n;
    r.sq_rel /= n;
    r.log10 /= n;
    r.rmse = (se / n).sqrt();
    r.rmse_log = (sle / n).sqrt();
    r.silog = si_value(&p, &g, 1.0).max(0.0).sqrt();
    r.delta1 = hits[0] as f64 / n;
    r.delta2 = hits[1] as f64 / n;
    r.delta3 = hits[2] as f64 / n;
    Ok(r)
}

impl MetricsReport {
    /// Per-sample average; pixel counts are summed.
    pub fn mean(reports: &[MetricsReport]) -> Result<MetricsReport> {
        if reports.is_empty() {
            return Err(Error::Usage("cannot average zero reports".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricsReport {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            log10: avg(|r| r.log10),
            silog: avg(|r| r.silog),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            valid_pixel_count: reports.iter().map(|r| r.valid_pixel_count).sum(),
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "AbsRel", "RMSE", "log10", "SqRel", "d1", "d2", "d3"
        );
        let _ = writeln!(
            s,
            "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            self.abs_rel, self.rmse, self.log10, self.sq_rel, self.delta1, self.delta2, self.delta3
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WIN: EvalWindow = EvalWindow { min: 0.1, cap: 10.0 };

    #[test]
    fn hand_case() {
        let r = compute_metrics(&[1.0, 2.0, 4.0], &[2.0; 3], &[true; 3], WIN).unwrap();
        assert_eq!(r.abs_rel, 0.5);
        assert_eq!(r.delta1, 1.0 / 3.0);
        assert!((r.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn uniform_ratio() {
        let gt = [1.0, 2.0, 3.0, 5.0];
        let pred: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        let r = compute_metrics(&pred, &gt, &[true; 4], WIN).unwrap();
        assert_eq!(r.delta1, 1.0);
        assert!((r.abs_rel - 0.2).abs() < 1e-12);
    }

    #[test]
    fn identity_is_perfect() {
        let gt = [0.5, 2.0, 7.0];
        let r = compute_metrics(&gt, &gt, &[true; 3], WIN).unwrap();
        assert_eq!((r.abs_rel, r.rmse, r.log10, r.silog), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.valid_pixel_count, 3);
    }

    #[test]
    fn cap_below_everything_is_an_error() {
        let w = EvalWindow { min: 0.1, cap: 0.5 };
        assert!(matches!(
            compute_metrics(&[1.0], &[2.0], &[true], w),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let tape = Tape::<f64>::new();
        let gt = Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let e = std::f64::consts::E;
        let pred = tape.constant(gt.map(|g| g * e));
        let l = si_loss(&tape, pred, &gt, &[true; 4], 0.5).unwrap();
        assert!((tape.value(l).item() - 0.5).abs() < 1e-12);
        let same = tape.constant(gt.clone());
        assert_eq!(tape.value(si_loss(&tape, same, &gt, &[true; 4], 0.5).unwrap()).item(), 0.0);
        assert!(matches!(
            si_loss(&tape, same, &gt, &[false; 4], 0.5),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let tape = Tape::<f64>::new();
        let gt = Tensor::from_f64(&[3], &[1.0, 0.0, 2.0]).unwrap();
        let pred = tape.var(Tensor::from_f64(&[3], &[2.0, 5.0, 4.0]).unwrap());
        let l = si_loss(&tape, pred, &gt, &[true, false, true], 1.0).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(pred).unwrap().data()[1], 0.0);
    }
}
