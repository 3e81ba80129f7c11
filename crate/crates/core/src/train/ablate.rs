//! The eight-row component ablation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use super::trainer::{Prepared, Trainer};
use crate::error::Result;
use crate::loss::{EvalWindow, MetricsReport};
use crate::pei::Toggles;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub steps: u64,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Columns P, E, PT, IT, AbsRel, RMSE, δ1.
    pub fn table(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        let mut s = String::new();
        let _ = writeln!(s, "{:>3} {:>3} {:>3} {:>3} {:>8} {:>8} {:>8}", "P", "E", "PT", "IT", "AbsRel", "RMSE", "d1");
        for r in &self.rows {
            let t = r.toggles;
            let _ = writeln!(
                s,
                "{:>3} {:>3} {:>3} {:>3} {:>8.4} {:>8.4} {:>8.4}",
                mark(t.partition),
                mark(t.enhance),
                mark(t.inject_patterns),
                mark(t.inject_image),
                r.metrics.abs_rel,
                r.metrics.rmse,
                r.metrics.delta1
            );
        }
        s
    }
}

/// Trains every row with the same seed and schedule, each into
/// `output/row<k>`, and evaluates on `eval` (the training samples when
/// empty).
pub fn ablate(base: &RunConfig, train: &[Prepared], eval: &[Prepared]) -> Result<AblationReport> {
    let eval = if eval.is_empty() { train } else { eval };
    let window = EvalWindow {
        min: base.model.depth.min,
        cap: base.eval_cap,
    };
    let mut rows = Vec::with_capacity(8);
    for (k, &toggles) in Toggles::ABLATION_ROWS.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.toggles = toggles;
        cfg.output = base.output.join(format!("row{}", k + 1));
        let mut trainer = Trainer::new(cfg, train.to_vec())?;
        let summary = trainer.run()?;
        rows.push(AblationRow {
            toggles,
            steps: summary.steps,
            final_loss: summary.final_loss,
            metrics: evaluate(&trainer.model, eval, window)?,
        });
    }
    Ok(AblationReport { rows })
}
