//! Threshold sweep: rebuild the effective-click test set at a range of
//! cutoffs and score every trained variant against each one.

use serde::Serialize;

use crate::datagen::{build_eval_set, EvalMode, Impression};
use crate::encoders::{Model, Variant};
use crate::error::{Error, Result};
use crate::evalrun::metrics::{evaluate, MetricReport};
use crate::newsrep::EmbeddingStore;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub theta: f64,
    /// `None` flags a threshold whose filtered set came out empty.
    pub metrics: Option<MetricReport>,
}

/// Inclusive arithmetic range of thresholds; the default sweep is
/// `sweep_thresholds(5.0, 40.0, 5.0)` → 5, 10, …, 40.
pub fn sweep_thresholds(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min > 0.0) || !min.is_finite() {
        return Err(Error::Config(format!(
            "sweep minimum must be a positive number of seconds, got {min}"
        )));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("sweep step must be positive, got {step}")));
    }
    if max < min || !max.is_finite() {
        return Err(Error::Config(format!(
            "sweep maximum {max} must be at least the minimum {min}"
        )));
    }
    // Counting first keeps the endpoint in the range even when floating
    // division lands a few ulps short, without ever overshooting it.
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| min + i as f64 * step).collect())
}

/// Evaluate every model on the effective-click set at every threshold.
/// Rows come out grouped by variant, thresholds ascending within each.
pub fn run_sweep(
    models: &[Model],
    store: &EmbeddingStore,
    test: &[Impression],
    thresholds: &[f64],
) -> Result<Vec<SweepRow>> {
    if models.is_empty() {
        return Err(Error::InvalidInput("no models to sweep".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidInput("no thresholds to sweep".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * thresholds.len());
    for model in models {
        for &theta in thresholds {
            let set = build_eval_set(test, EvalMode::Real, theta)?;
            let metrics = if set.impressions.is_empty() {
                None
            } else {
                Some(evaluate(model, store, &set)?)
            };
            rows.push(SweepRow {
                variant: model.cfg.variant,
                theta,
                metrics,
            });
        }
    }
    Ok(rows)
}

/// Render sweep rows as CSV. Empty-set rows keep their variant and
/// threshold but leave the four metric fields blank.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("variant,theta,auc,mrr,ndcg5,ndcg10\n");
    for row in rows {
        match &row.metrics {
            Some(m) => out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.variant, row.theta, m.auc, m.mrr, m.ndcg5, m.ndcg10
            )),
            None => out.push_str(&format!("{},{},,,,\n", row.variant, row.theta)),
        }
    }
    out
}
