//! Evaluation over a dataset split.

use std::path::Path;

use super::checkpoint;
use super::trainer::{load_split, Prepared};
use crate::error::{Error, Result};
use crate::loss::{compute_metrics, EvalWindow, MetricsReport};
use crate::model::Model;
use crate::scenegen::Split;

/// Mean of per-sample metrics.
pub fn evaluate(model: &Model<f32>, samples: &[Prepared], window: EvalWindow) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation split is empty".into()));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.image)?;
        reports.push(compute_metrics(&pred.to_f64(), &s.depth.to_f64(), &s.valid, window)?);
    }
    MetricsReport::mean(&reports)
}

/// Loads a checkpoint and evaluates it on `split` of `data` (the dataset
/// recorded in the checkpoint when `data` is `None`).
pub fn evaluate_checkpoint(dir: &Path, data: Option<&Path>, split: Split, cap: Option<f64>) -> Result<MetricsReport> {
    let loaded = checkpoint::load(dir)?;
    let cfg = &loaded.manifest.config;
    let data = data.unwrap_or(&cfg.data);
    let samples = load_split(data, split)?;
    let window = EvalWindow {
        min: cfg.model.depth.min,
        cap: cap.unwrap_or(cfg.eval_cap),
    };
    evaluate(&loaded.model, &samples, window)
}
