//! Per-impression ranking metrics and the evaluation harness that
//! macro-averages them over a dataset.
//!
//! Each metric takes one impression's click labels and model scores.
//! An impression can only be ranked when it has something to rank:
//! the bare metrics return `None` when a required class is absent, and
//! [`evaluate`] skips (and counts) such impressions so that all four
//! means always describe the same subset.

use serde::{Deserialize, Serialize};

use crate::datagen::{mask_eval_dwell, EvalSet, Impression};
use crate::encoders::{candidate_matrix, encode_history, Model};
use crate::error::{Error, Result};
use crate::newsrep::EmbeddingStore;

/// Macro-averaged metrics over the impressions of one evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// Impressions the means cover.
    pub n: usize,
    /// Impressions dropped for lacking a positive or a negative.
    pub skipped: usize,
}

fn check_inputs(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "got {} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric(
            "non-finite candidate score in metric input".into(),
        ));
    }
    Ok(())
}

/// Fraction of (clicked, unclicked) pairs the scores order correctly,
/// ties counting one half. `None` when either class is missing — a
/// single-class impression has no pairs to judge.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<Option<f64>> {
    check_inputs(labels, scores)?;
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 0)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    let mut correct = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                correct += 1.0;
            } else if p == q {
                correct += 0.5;
            }
        }
    }
    Ok(Some(correct / (pos.len() * neg.len()) as f64))
}

/// Candidate indices ordered by descending score. The sort is stable, so
/// tied candidates keep their input order — rank assignment never depends
/// on anything but the inputs.
fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
    });
    idx
}

/// Mean over clicked items of the reciprocal of their rank. `None` when
/// nothing was clicked.
pub fn mrr(labels: &[u8], scores: &[f64]) -> Result<Option<f64>> {
    check_inputs(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let mut sum = 0.0;
    for (pos, &i) in rank_order(scores).iter().enumerate() {
        if labels[i] != 0 {
            sum += 1.0 / (pos + 1) as f64;
        }
    }
    Ok(Some(sum / n_pos as f64))
}

/// Binary-gain normalized discounted cumulative gain at cutoff `k`:
/// DCG sums 1/log2(rank+1) over clicked items ranked within `k`,
/// normalized by the DCG of the ideal ordering. `None` when nothing was
/// clicked.
pub fn ndcg_at_k(labels: &[u8], scores: &[f64], k: usize) -> Result<Option<f64>> {
    if k == 0 {
        return Err(Error::Config("ndcg cutoff k must be at least 1".into()));
    }
    check_inputs(labels, scores)?;
    let n_pos = labels.iter().filter(|&&y| y != 0).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = rank_order(scores)
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| labels[i] != 0)
        .map(|(pos, _)| discount(pos))
        .sum();
    let idcg: f64 = (0..n_pos.min(k)).map(discount).sum();
    Ok(Some(dcg / idcg))
}

/// AUC, MRR, nDCG@5, nDCG@10 of one impression, or `None` when the
/// impression must be skipped because a class is absent.
pub fn impression_metrics(labels: &[u8], scores: &[f64]) -> Result<Option<[f64; 4]>> {
    let Some(a) = auc(labels, scores)? else {
        return Ok(None);
    };
    // AUC present implies at least one positive, so the rest are defined.
    let m = mrr(labels, scores)?.expect("positive present");
    let n5 = ndcg_at_k(labels, scores, 5)?.expect("positive present");
    let n10 = ndcg_at_k(labels, scores, 10)?.expect("positive present");
    Ok(Some([a, m, n5, n10]))
}

/// Evaluation worker cap from `DWELLREC_THREADS`; unset, unparsable, or
/// zero all mean one worker, keeping runs deterministic by default.
pub fn thread_cap() -> usize {
    std::env::var("DWELLREC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or(1)
}

fn score_one(model: &Model, store: &EmbeddingStore, imp: &Impression) -> Result<Option<[f64; 4]>> {
    let eh = encode_history(&imp.history, store, &model.cfg)?;
    let ids: Vec<&str> = imp.cands.iter().map(|c| c.nid.as_str()).collect();
    let cands = candidate_matrix(store, &ids)?;
    let scores = model.score_candidates(&eh, &cands)?;
    let labels: Vec<u8> = imp.cands.iter().map(|c| c.y).collect();
    impression_metrics(&labels, &scores)
}

fn reduce(per: Vec<Option<[f64; 4]>>) -> Result<MetricReport> {
    let total = per.len();
    if total == 0 {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let kept: Vec<[f64; 4]> = per.into_iter().flatten().collect();
    let skipped = total - kept.len();
    if skipped * 2 > total {
        return Err(Error::InvalidInput(format!(
            "{skipped} of {total} impressions lack a positive or a negative; \
             the report would describe less than half the set"
        )));
    }
    let n = kept.len() as f64;
    let mut sums = [0.0f64; 4];
    for row in &kept {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(MetricReport {
        auc: sums[0] / n,
        mrr: sums[1] / n,
        ndcg5: sums[2] / n,
        ndcg10: sums[3] / n,
        n: kept.len(),
        skipped,
    })
}

/// Score and rank every impression of `set` with `model`, macro-averaging
/// the per-impression metrics. Worker count comes from `DWELLREC_THREADS`;
/// results are reduced in input order, so the report does not depend on
/// how the work was sharded.
pub fn evaluate(model: &Model, store: &EmbeddingStore, set: &EvalSet) -> Result<MetricReport> {
    evaluate_with_workers(model, store, set, thread_cap())
}

/// [`evaluate`] with an explicit worker count.
pub fn evaluate_with_workers(
    model: &Model,
    store: &EmbeddingStore,
    set: &EvalSet,
    workers: usize,
) -> Result<MetricReport> {
    let imps = &set.impressions;
    let workers = workers.max(1).min(imps.len().max(1));
    let per: Vec<Option<[f64; 4]>> = if workers <= 1 {
        imps.iter()
            .map(|imp| score_one(model, store, imp))
            .collect::<Result<_>>()?
    } else {
        let chunk = imps.len().div_ceil(workers);
        let chunks: Vec<Result<Vec<Option<[f64; 4]>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = imps
                .chunks(chunk)
                .map(|ch| {
                    s.spawn(move || {
                        ch.iter()
                            .map(|imp| score_one(model, store, imp))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut per = Vec::with_capacity(imps.len());
        for c in chunks {
            per.extend(c?);
        }
        per
    };
    reduce(per)
}

/// Evaluate with an arbitrary scoring function instead of a model —
/// sequential, since the scorer may carry state (a seeded generator,
/// a cache). Used by oracle and calibration tests.
pub fn evaluate_scored<F>(set: &EvalSet, mut scorer: F) -> Result<MetricReport>
where
    F: FnMut(&Impression) -> Result<Vec<f64>>,
{
    let per = set
        .impressions
        .iter()
        .map(|imp| {
            let scores = scorer(imp)?;
            let labels: Vec<u8> = imp.cands.iter().map(|c| c.y).collect();
            impression_metrics(&labels, &scores)
        })
        .collect::<Result<Vec<_>>>()?;
    reduce(per)
}

/// How much a model loses when dwell telemetry disappears: the same set
/// evaluated as-is and with every history dwell masked to unknown, with
/// per-metric deltas (masked minus unmasked).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GtbReport {
    pub unmasked: MetricReport,
    pub masked: MetricReport,
    pub delta_auc: f64,
    pub delta_mrr: f64,
    pub delta_ndcg5: f64,
    pub delta_ndcg10: f64,
}

pub fn run_masked_eval(
    model: &Model,
    store: &EmbeddingStore,
    set: &EvalSet,
) -> Result<GtbReport> {
    let unmasked = evaluate(model, store, set)?;
    let masked = evaluate(model, store, &mask_eval_dwell(set))?;
    Ok(GtbReport {
        unmasked,
        masked,
        delta_auc: masked.auc - unmasked.auc,
        delta_mrr: masked.mrr - unmasked.mrr,
        delta_ndcg5: masked.ndcg5 - unmasked.ndcg5,
        delta_ndcg10: masked.ndcg10 - unmasked.ndcg10,
    })
}
