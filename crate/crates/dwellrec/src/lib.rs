//! Dwell-time-aware neural news recommendation on synthetic impression logs.
//!
//! Click labels are a noisy proxy for interest: users click and bounce.
//! This crate builds user encoders that inject per-click *dwell time* into
//! the encoding of a user's click history, and compares them against
//! dwell-blind attention baselines under evaluation sets that re-label
//! short-dwell clicks as non-interest.
//!
//! The pieces, bottom-up:
//!
//! - [`dwell`] — discretization of raw dwell seconds into bucket ids, plus
//!   distribution statistics over a log.
//! - [`nncore`] — a minimal dense-tensor substrate: a reverse-mode tape over
//!   a fixed op set, Adam, a finite-difference gradient checker, and a
//!   binary checkpoint format.
//! - [`newsrep`] — news embedding stores (TSV + binary), a deterministic
//!   synthetic embedder over topic mixtures, and an optional remote fetch
//!   client with caching.
//! - [`datagen`] — a seeded generator for impression logs with a click model
//!   that ties dwell to topical alignment, plus training-sample and
//!   evaluation-set construction.
//! - [`encoders`] — the four user encoders: two attention baselines and two
//!   dwell-injected variants (gated split `dwew`, query/key concatenation
//!   `dwea`), with scoring and the negative-sampling loss.
//! - [`evalrun`] — ranking metrics (AUC/MRR/nDCG), the evaluation harness,
//!   the training loop, dwell-masking robustness runs, and the
//!   effectiveness-threshold sweep.
//! - [`cli`] — the `dwellrec` binary: `gen`, `stats`, `train`, `eval`,
//!   `sweep`, `grad-check`.
//!
//! Everything is deterministic given a seed; `DWELLREC_THREADS` (default 1)
//! caps evaluation parallelism without changing any output byte.

pub mod cli;
pub mod datagen;
pub mod dwell;
pub mod encoders;
pub mod error;
pub mod evalrun;
pub mod newsrep;
pub mod nncore;

pub use error::{Error, Result};
