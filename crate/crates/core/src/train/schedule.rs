//! Linear warmup followed by cosine decay.

use crate::error::{Error, Result};

pub fn lr_at(step: u64, total: u64, warmup: u64, base: f64) -> Result<f64> {
    if warmup >= total || step > total {
        return Err(Error::Usage(format!(
            "schedule needs step <= total and warmup < total (step {step}, warmup {warmup}, total {total})"
        )));
    }
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lr_at(10, 110, 10, 2e-3).unwrap(), 2e-3);
        assert!(lr_at(110, 110, 10, 2e-3).unwrap().abs() < 1e-18);
        assert!((lr_at(60, 110, 10, 2e-3).unwrap() - 1e-3).abs() < 1e-15);
        assert_eq!(lr_at(0, 110, 10, 2e-3).unwrap(), 0.0);
        assert_eq!(lr_at(0, 5, 0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn continuous_and_non_negative() {
        let (total, warm, base) = (1000, 100, 1.0);
        let mut prev = 0.0;
        for s in 0..=total {
            let lr = lr_at(s, total, warm, base).unwrap();
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= 0.011, "jump at {s}");
            prev = lr;
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(lr_at(0, 10, 10, 1.0).is_err());
        assert!(lr_at(11, 10, 2, 1.0).is_err());
    }
}
