//! Ranking metrics, the mini-batch training loop, and the experiment
//! runners that tie models, stores, and evaluation sets together.

pub mod experiments;
pub mod metrics;
pub mod train;

pub use experiments::{run_sweep, sweep_csv, sweep_thresholds, SweepRow};
pub use metrics::{
    auc, evaluate, impression_metrics, mrr, ndcg_at_k, run_masked_eval, GtbReport, MetricReport,
};
pub use train::{run_training, Adam, TrainRun, TrainingConfig};
