//! User encoders that turn a click history into a vector and score news
//! candidates against it.
//!
//! Four variants share one scoring head — the dot product between the user
//! vector and a learned projection of the candidate embedding — and differ
//! in how the history becomes that vector:
//!
//! - `base_attpool`: project each clicked item, then attention-pool.
//! - `base_mha`: self-attention over clicked items, then attention-pool.
//! - `dwew`: encode the full history and the subsequence of reads that
//!   lasted beyond a threshold with one *shared* attention encoder, and
//!   blend the two user vectors through a two-way gate computed from the
//!   user's dwell profile. An empty filtered subsequence bypasses the gate
//!   and falls back to the full-history vector.
//! - `dwea`: concatenate a dwell-bucket embedding onto each history row
//!   before the query/key projections, so the attention weights — not the
//!   attended values — are conditioned on reading time.
//!
//! Histories are packed most-recent-last into a window of `max_history`
//! rows. Padding always trails the valid prefix, and every forward slices
//! off that prefix before touching the tape, so padded rows cannot
//! influence any output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::datagen::ClickRecord;
use crate::dwell::{discretize_with, DwellBucket, DwellVariant, RawDwell};
use crate::error::{Error, Result};
use crate::newsrep::EmbeddingStore;
use crate::nncore::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nncore::gradcheck::{grad_check, GradCheckReport};
use crate::nncore::layers::{att_pool, linear, multi_head_attention, AttPoolP, LinearP, MhaP};
use crate::nncore::tape::{NodeId, ParamSet, Tape};
use crate::nncore::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "base_attpool")]
    BaseAttPool,
    #[serde(rename = "base_mha")]
    BaseMha,
    #[serde(rename = "dwew")]
    DweW,
    #[serde(rename = "dwea")]
    DweA,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaseAttPool,
        Variant::BaseMha,
        Variant::DweW,
        Variant::DweA,
    ];

    /// Whether the variant reads dwell buckets at all. The two baselines
    /// are dwell-blind by construction.
    pub fn uses_dwell(self) -> bool {
        matches!(self, Variant::DweW | Variant::DweA)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaseAttPool => "base_attpool",
            Variant::BaseMha => "base_mha",
            Variant::DweW => "dwew",
            Variant::DweA => "dwea",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown encoder variant `{s}` (expected one of base_attpool, base_mha, dwew, dwea)"
                ))
            })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: Variant,
    /// News embedding dimension; must match the store.
    pub d: usize,
    /// Dwell-bucket embedding dimension.
    pub d_dw: usize,
    /// Attention heads.
    pub h: usize,
    /// Per-head attention dimension; the user vector has dimension h·a.
    pub a: usize,
    /// Attention-pool query dimension; h·a when absent.
    pub attpool_dim: Option<usize>,
    /// History window: only the most recent clicks are encoded.
    pub max_history: usize,
    /// Reads longer than this many seconds count as genuine interest.
    pub theta_s: f64,
    pub k_negatives: usize,
    pub dropout: f64,
    pub dwell_variant: DwellVariant,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            variant: Variant::DweA,
            d: 64,
            d_dw: 20,
            h: 10,
            a: 20,
            attpool_dim: None,
            max_history: 50,
            theta_s: 5.0,
            k_negatives: 4,
            dropout: 0.2,
            dwell_variant: DwellVariant::Literal,
        }
    }
}

impl EncoderConfig {
    /// User-vector dimension.
    pub fn m(&self) -> usize {
        self.h * self.a
    }

    pub fn attpool(&self) -> usize {
        self.attpool_dim.unwrap_or_else(|| self.m())
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("d_dw", self.d_dw),
            ("h", self.h),
            ("a", self.a),
            ("max_history", self.max_history),
            ("attpool_dim", self.attpool()),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!(
                    "encoder dimension {name} must be positive"
                )));
            }
        }
        if self.theta_s <= 0.0 || !self.theta_s.is_finite() {
            return Err(Error::Config(format!(
                "theta_s must be a positive number of seconds, got {}",
                self.theta_s
            )));
        }
        if self.k_negatives == 0 {
            return Err(Error::Config("k_negatives must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// A click history ready for the encoders: one embedding row per click,
/// its dwell bucket, and the raw dwell seconds (the threshold split needs
/// seconds, which buckets are too coarse to recover). Valid rows occupy
/// the prefix `0..n_valid`; everything after is zero padding with bucket 0.
#[derive(Clone, Debug)]
pub struct EncodedHistory {
    pub rows: Tensor,
    pub buckets: Vec<u8>,
    pub dwells: Vec<RawDwell>,
    pub n_valid: usize,
}

impl EncodedHistory {
    pub fn is_empty(&self) -> bool {
        self.n_valid == 0
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.rows.rows()).map(|i| i < self.n_valid).collect()
    }

    /// Pretend dwell was never recorded: every valid row gets the
    /// unknown-dwell bucket. Idempotent; embeddings untouched.
    pub fn mask_dwell(&self) -> EncodedHistory {
        let mut out = self.clone();
        for i in 0..out.n_valid {
            out.buckets[i] = DwellBucket::UNKNOWN.id();
            out.dwells[i] = RawDwell::Unknown;
        }
        out
    }
}

/// Embed the most recent `cfg.max_history` clicks, oldest first. An empty
/// history yields an all-padding result (`is_empty()` reports it); an id
/// absent from the store is an error naming that id.
pub fn encode_history(
    history: &[ClickRecord],
    store: &EmbeddingStore,
    cfg: &EncoderConfig,
) -> Result<EncodedHistory> {
    if store.dim() != cfg.d {
        return Err(Error::Shape(format!(
            "store dimension {} does not match encoder d = {}",
            store.dim(),
            cfg.d
        )));
    }
    let h = cfg.max_history;
    let start = history.len().saturating_sub(h);
    let recent = &history[start..];
    let mut rows = Tensor::zeros(h, cfg.d);
    let mut buckets = vec![0u8; h];
    let mut dwells = vec![RawDwell::Unknown; h];
    for (i, rec) in recent.iter().enumerate() {
        let v = store.lookup(&rec.nid)?;
        rows.as_mut_slice()[i * cfg.d..(i + 1) * cfg.d].copy_from_slice(v);
        buckets[i] = discretize_with(rec.dwell, cfg.dwell_variant)?.id();
        dwells[i] = rec.dwell;
    }
    Ok(EncodedHistory {
        rows,
        buckets,
        dwells,
        n_valid: recent.len(),
    })
}

/// Split a history into the full sequence and the subsequence of rows
/// whose recorded dwell strictly exceeds `theta` seconds. Unknown dwell
/// never qualifies. Both halves keep row order and prefix packing.
pub fn split_effective(eh: &EncodedHistory, theta: f64) -> (EncodedHistory, EncodedHistory) {
    let h = eh.rows.rows();
    let d = eh.rows.cols();
    let mut rows = Tensor::zeros(h, d);
    let mut buckets = vec![0u8; h];
    let mut dwells = vec![RawDwell::Unknown; h];
    let mut n = 0usize;
    for i in 0..eh.n_valid {
        if matches!(eh.dwells[i], RawDwell::Known(t) if t > theta) {
            rows.as_mut_slice()[n * d..(n + 1) * d].copy_from_slice(eh.rows.row_slice(i));
            buckets[n] = eh.buckets[i];
            dwells[n] = eh.dwells[i];
            n += 1;
        }
    }
    let effective = EncodedHistory {
        rows,
        buckets,
        dwells,
        n_valid: n,
    };
    (eh.clone(), effective)
}

// Parameter names are the checkpoint contract: loading validates the file
// against exactly the set the variant owns.
const NEWS_PROJ_W: &str = "news_proj.w";
const NEWS_PROJ_B: &str = "news_proj.b";
const MHA_WO: &str = "mha.wo";
const ATTPOOL_W: &str = "attpool.w";
const ATTPOOL_B: &str = "attpool.b";
const ATTPOOL_V: &str = "attpool.v";
const DWELL_TABLE: &str = "dwell_table";
const GATE_POOL_W: &str = "gate.pool.w";
const GATE_POOL_B: &str = "gate.pool.b";
const GATE_POOL_V: &str = "gate.pool.v";
const GATE_HIDDEN_W: &str = "gate.hidden.w";
const GATE_HIDDEN_B: &str = "gate.hidden.b";
const GATE_OUT_W: &str = "gate.out.w";
const GATE_OUT_B: &str = "gate.out.b";

/// Where each logical block lives inside the flat `ParamSet`.
#[derive(Clone, Debug)]
struct ModelIdx {
    news_proj: LinearP,
    mha: Option<MhaP>,
    attpool: AttPoolP,
    dwell_table: Option<usize>,
    gate_pool: Option<AttPoolP>,
    gate_hidden: Option<LinearP>,
    gate_out: Option<LinearP>,
}

/// Handles a forward pass exposes for inspection. `user` is the final
/// vector; the rest are present only where the variant builds them.
pub struct UserForward {
    pub user: NodeId,
    /// Full-history vector (dwew only).
    pub user_full: Option<NodeId>,
    /// Long-read-subsequence vector (dwew, when any row qualified).
    pub user_effective: Option<NodeId>,
    /// 1×2 blend weights, index 0 = effective (dwew, when gated).
    pub gate: Option<NodeId>,
    /// True when the history had no valid rows and `user` is a zero leaf.
    pub empty: bool,
}

#[derive(Debug)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
    idx: ModelIdx,
}

impl Model {
    pub fn new(cfg: &EncoderConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let m = cfg.m();
        let pool_dim = cfg.attpool();

        let news_proj = LinearP {
            w: ps.add_xavier(NEWS_PROJ_W, m, cfg.d, &mut rng)?,
            b: ps.add_zeros(NEWS_PROJ_B, 1, m)?,
        };

        let mha = if cfg.variant == Variant::BaseAttPool {
            None
        } else {
            // Query/key input width grows by the dwell embedding when the
            // buckets are concatenated in; values always see plain rows.
            let dq = match cfg.variant {
                Variant::DweA => cfg.d + cfg.d_dw,
                _ => cfg.d,
            };
            let mut wq = Vec::with_capacity(cfg.h);
            let mut wk = Vec::with_capacity(cfg.h);
            let mut wv = Vec::with_capacity(cfg.h);
            for i in 0..cfg.h {
                wq.push(ps.add_xavier(&format!("mha.wq.{i}"), cfg.a, dq, &mut rng)?);
                wk.push(ps.add_xavier(&format!("mha.wk.{i}"), cfg.a, dq, &mut rng)?);
                wv.push(ps.add_xavier(&format!("mha.wv.{i}"), cfg.a, cfg.d, &mut rng)?);
            }
            Some(MhaP {
                wq,
                wk,
                wv,
                wo: ps.add_xavier(MHA_WO, m, m, &mut rng)?,
            })
        };

        let attpool = AttPoolP {
            w: ps.add_xavier(ATTPOOL_W, pool_dim, m, &mut rng)?,
            b: ps.add_zeros(ATTPOOL_B, 1, pool_dim)?,
            v: ps.add_xavier(ATTPOOL_V, 1, pool_dim, &mut rng)?,
        };

        let dwell_table = if cfg.variant.uses_dwell() {
            let vocab = cfg.dwell_variant.vocab_size();
            let i = ps.add_xavier(DWELL_TABLE, vocab, cfg.d_dw, &mut rng)?;
            // Bucket 0 is padding; its row stays zero so padded positions
            // carry no dwell signal.
            for c in 0..cfg.d_dw {
                ps.get_mut(i).value.set(0, c, 0.0);
            }
            Some(i)
        } else {
            None
        };

        let (gate_pool, gate_hidden, gate_out) = if cfg.variant == Variant::DweW {
            let g = cfg.d_dw;
            (
                Some(AttPoolP {
                    w: ps.add_xavier(GATE_POOL_W, g, g, &mut rng)?,
                    b: ps.add_zeros(GATE_POOL_B, 1, g)?,
                    v: ps.add_xavier(GATE_POOL_V, 1, g, &mut rng)?,
                }),
                Some(LinearP {
                    w: ps.add_xavier(GATE_HIDDEN_W, g, g, &mut rng)?,
                    b: ps.add_zeros(GATE_HIDDEN_B, 1, g)?,
                }),
                Some(LinearP {
                    w: ps.add_xavier(GATE_OUT_W, 2, g, &mut rng)?,
                    b: ps.add_zeros(GATE_OUT_B, 1, 2)?,
                }),
            )
        } else {
            (None, None, None)
        };

        Ok(Model {
            cfg: cfg.clone(),
            params: ps,
            idx: ModelIdx {
                news_proj,
                mha,
                attpool,
                dwell_table,
                gate_pool,
                gate_hidden,
                gate_out,
            },
        })
    }

    /// Zero the gradient of the dwell table's padding row. Call after each
    /// backward pass, before the optimizer step, so the row stays pinned.
    pub fn pin_padding_gradients(&mut self) {
        if let Some(i) = self.idx.dwell_table {
            let d_dw = self.cfg.d_dw;
            let grad = &mut self.params.get_mut(i).grad;
            for c in 0..d_dw {
                grad.set(0, c, 0.0);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, path)
    }

    /// Rebuild a model from a checkpoint. The file must contain exactly
    /// the parameters the config's variant owns, with matching shapes; the
    /// dwell table's padding row is re-zeroed to keep its invariant even
    /// against a hand-edited file.
    pub fn load(cfg: &EncoderConfig, path: &Path) -> Result<Model> {
        let mut model = Model::new(cfg, 0)?;
        let loaded = load_checkpoint(path)?;
        if loaded.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters but a {} model has {}",
                loaded.len(),
                model.cfg.variant,
                model.params.len()
            )));
        }
        for p in model.params.iter_mut() {
            let src = loaded
                .index_of(&p.name)
                .map(|i| loaded.get(i))
                .ok_or_else(|| {
                    Error::Format(format!("checkpoint is missing parameter `{}`", p.name))
                })?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?} in the checkpoint, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        if let Some(i) = model.idx.dwell_table {
            for c in 0..model.cfg.d_dw {
                model.params.get_mut(i).value.set(0, c, 0.0);
            }
        }
        Ok(model)
    }

    /// Build the user vector on `tape`. Dropout fires only when `training`
    /// and draws from `rng`, so reproducibility is the caller's seed
    /// discipline.
    pub fn user_forward(
        &self,
        tape: &mut Tape,
        eh: &EncodedHistory,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<UserForward> {
        forward_user(&self.cfg, &self.idx, &self.params, tape, eh, training, rng)
    }

    /// Candidate scores, one per row of `cands`, higher meaning more
    /// likely to be clicked. Evaluation path: no dropout, fresh tape.
    pub fn score_candidates(&self, eh: &EncodedHistory, cands: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = forward_scores(
            &self.cfg,
            &self.idx,
            &self.params,
            &mut tape,
            eh,
            cands,
            false,
            &mut rng,
        )?;
        let v = tape.value(scores);
        Ok((0..v.rows()).map(|r| v.get(r, 0)).collect())
    }

    /// Forward plus ranking loss for one training sample: candidate row 0
    /// is the clicked item, the remaining rows are its negatives.
    pub fn sample_loss_node(
        &self,
        tape: &mut Tape,
        eh: &EncodedHistory,
        cands: &Tensor,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        forward_loss(
            &self.cfg,
            &self.idx,
            &self.params,
            tape,
            eh,
            cands,
            training,
            rng,
        )
    }
}

/// Stack candidate embeddings into one matrix, a row per id, in order.
pub fn candidate_matrix(store: &EmbeddingStore, ids: &[&str]) -> Result<Tensor> {
    let d = store.dim();
    let mut m = Tensor::zeros(ids.len(), d);
    for (r, id) in ids.iter().enumerate() {
        let v = store.lookup(id)?;
        m.as_mut_slice()[r * d..(r + 1) * d].copy_from_slice(v);
    }
    Ok(m)
}

#[allow(clippy::too_many_arguments)]
fn forward_user(
    cfg: &EncoderConfig,
    idx: &ModelIdx,
    ps: &ParamSet,
    tape: &mut Tape,
    eh: &EncodedHistory,
    training: bool,
    rng: &mut impl Rng,
) -> Result<UserForward> {
    let n = eh.n_valid;
    if n == 0 {
        return Ok(UserForward {
            user: tape.leaf(Tensor::zeros(1, cfg.m())),
            user_full: None,
            user_effective: None,
            gate: None,
            empty: true,
        });
    }
    let x = tape.leaf(eh.rows.top_rows(n));

    let fwd = match cfg.variant {
        Variant::BaseAttPool => {
            let xd = tape.dropout(x, cfg.dropout, training, rng)?;
            let proj = linear(tape, ps, xd, &idx.news_proj)?;
            let (u, _) = att_pool(tape, ps, proj, &idx.attpool, None)?;
            UserForward {
                user: u,
                user_full: None,
                user_effective: None,
                gate: None,
                empty: false,
            }
        }
        Variant::BaseMha => {
            let u = attend_and_pool(cfg, idx, ps, tape, x, None, training, rng)?;
            UserForward {
                user: u,
                user_full: None,
                user_effective: None,
                gate: None,
                empty: false,
            }
        }
        Variant::DweA => {
            let table = tape.param(ps, idx.dwell_table.expect("dwea owns a dwell table"));
            let ids: Vec<usize> = eh.buckets[..n].iter().map(|&b| b as usize).collect();
            let du = tape.embed_rows(table, &ids)?;
            let u = attend_and_pool(cfg, idx, ps, tape, x, Some(du), training, rng)?;
            UserForward {
                user: u,
                user_full: None,
                user_effective: None,
                gate: None,
                empty: false,
            }
        }
        Variant::DweW => {
            let u_full = attend_and_pool(cfg, idx, ps, tape, x, None, training, rng)?;
            let (_, eff) = split_effective(eh, cfg.theta_s);
            if eff.is_empty() {
                // No read could be confirmed as genuine interest, so the
                // full-history vector stands alone; the gate never runs.
                return Ok(UserForward {
                    user: u_full,
                    user_full: Some(u_full),
                    user_effective: None,
                    gate: None,
                    empty: false,
                });
            }
            let xe = tape.leaf(eff.rows.top_rows(eff.n_valid));
            let u_eff = attend_and_pool(cfg, idx, ps, tape, xe, None, training, rng)?;

            // The blend weight comes from the dwell profile of the FULL
            // history — how much of what this user clicks do they actually
            // read — pooled down to one d_dw-wide vector.
            let table = tape.param(ps, idx.dwell_table.expect("dwew owns a dwell table"));
            let ids: Vec<usize> = eh.buckets[..n].iter().map(|&b| b as usize).collect();
            let du = tape.embed_rows(table, &ids)?;
            let gate_pool = idx.gate_pool.as_ref().expect("dwew owns a gate pool");
            let gate_hidden = idx.gate_hidden.as_ref().expect("dwew owns a gate mlp");
            let gate_out = idx.gate_out.as_ref().expect("dwew owns gate logits");
            let (pooled, _) = att_pool(tape, ps, du, gate_pool, None)?;
            let hid = linear(tape, ps, pooled, gate_hidden)?;
            let hid = tape.tanh(hid);
            let logits = linear(tape, ps, hid, gate_out)?;
            let (gate, _) = tape.softmax_rows(logits, None)?;
            let g_eff = tape.index(gate, 0)?;
            let g_full = tape.index(gate, 1)?;
            let eff_part = tape.scale_by_scalar(g_eff, u_eff)?;
            let full_part = tape.scale_by_scalar(g_full, u_full)?;
            let u = tape.add(eff_part, full_part)?;
            UserForward {
                user: u,
                user_full: Some(u_full),
                user_effective: Some(u_eff),
                gate: Some(gate),
                empty: false,
            }
        }
    };
    Ok(fwd)
}

/// Shared trunk of the attention variants: optional dwell-embedding concat
/// on the query/key side, multi-head attention over the rows, dropout,
/// attention pooling down to one vector.
#[allow(clippy::too_many_arguments)]
fn attend_and_pool(
    cfg: &EncoderConfig,
    idx: &ModelIdx,
    ps: &ParamSet,
    tape: &mut Tape,
    x: NodeId,
    dwell_rows: Option<NodeId>,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let mha = idx.mha.as_ref().expect("attention variants own MHA params");
    let xd = tape.dropout(x, cfg.dropout, training, rng)?;
    let qk = match dwell_rows {
        Some(du) => tape.concat_cols(xd, du)?,
        None => xd,
    };
    let ctx = multi_head_attention(tape, ps, qk, qk, xd, mha, None)?;
    let ctx = tape.dropout(ctx, cfg.dropout, training, rng)?;
    let (u, _) = att_pool(tape, ps, ctx, &idx.attpool, None)?;
    Ok(u)
}

#[allow(clippy::too_many_arguments)]
fn forward_scores(
    cfg: &EncoderConfig,
    idx: &ModelIdx,
    ps: &ParamSet,
    tape: &mut Tape,
    eh: &EncodedHistory,
    cands: &Tensor,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    if cands.cols() != cfg.d {
        return Err(Error::Shape(format!(
            "candidate rows have dimension {}, encoder d = {}",
            cands.cols(),
            cfg.d
        )));
    }
    if cands.rows() == 0 {
        return Err(Error::InvalidInput("no candidates to score".into()));
    }
    let fwd = forward_user(cfg, idx, ps, tape, eh, training, rng)?;
    let c = tape.leaf(cands.clone());
    let proj = linear(tape, ps, c, &idx.news_proj)?; // n_c × m
    let ut = tape.transpose(fwd.user); // m × 1
    tape.matmul(proj, ut) // n_c × 1
}

#[allow(clippy::too_many_arguments)]
fn forward_loss(
    cfg: &EncoderConfig,
    idx: &ModelIdx,
    ps: &ParamSet,
    tape: &mut Tape,
    eh: &EncodedHistory,
    cands: &Tensor,
    training: bool,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let scores = forward_scores(cfg, idx, ps, tape, eh, cands, training, rng)?;
    let row = tape.transpose(scores); // 1 × (K+1)
    tape.neg_log_softmax(row, 0)
}

/// Ranking loss of one sample from raw scores: softmax cross-entropy of
/// the clicked score against the negatives, max-subtracted so huge scores
/// cannot overflow. The tape computes the same quantity during training;
/// this standalone form exists for reporting and tests.
pub fn sample_loss(pos_score: f64, neg_scores: &[f64]) -> Result<f64> {
    if neg_scores.is_empty() {
        return Err(Error::InvalidInput(
            "sample_loss needs at least one negative score".into(),
        ));
    }
    if !pos_score.is_finite() || neg_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in sample_loss".into()));
    }
    let max = neg_scores.iter().fold(pos_score, |m, &s| m.max(s));
    let sum: f64 =
        (pos_score - max).exp() + neg_scores.iter().map(|&s| (s - max).exp()).sum::<f64>();
    Ok(sum.ln() + max - pos_score)
}

/// Aggregate result of [`gradient_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteReport {
    pub trials: usize,
    /// Parameter elements compared against central differences.
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// Target and parameter element where the worst error lives.
    pub worst: String,
}

impl GradSuiteReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.n_checked > 0
    }
}

const GRAD_EPS: f64 = 1e-5;

/// Finite-difference audit of every layer and every encoder variant at
/// tiny dimensions: `trials` randomized instances are dealt round-robin
/// across ten targets (six layer compositions, four full forward+loss
/// variants), and the report carries the worst relative error seen for any
/// parameter element anywhere.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<GradSuiteReport> {
    let mut max_rel_err = 0.0f64;
    let mut worst = String::from("none");
    let mut n_checked = 0usize;

    let n_targets = 6 + Variant::ALL.len();
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let (label, report) = match t % n_targets {
            0 => ("linear", check_linear(&mut rng)?),
            1 => ("tanh_chain", check_tanh_chain(&mut rng)?),
            2 => ("softmax_scalar_ops", check_softmax_scalar_ops(&mut rng)?),
            3 => ("att_pool", check_att_pool(&mut rng)?),
            4 => ("mha_concat", check_mha_concat(&mut rng)?),
            5 => ("embed_dropout", check_embed_dropout(&mut rng)?),
            i => {
                let v = Variant::ALL[i - 6];
                (v.name(), check_variant(v, &mut rng)?)
            }
        };
        n_checked += report.n_checked;
        if report.max_rel_err > max_rel_err {
            max_rel_err = report.max_rel_err;
            let at = report
                .worst
                .map(|(name, i)| format!(" {name}[{i}]"))
                .unwrap_or_default();
            worst = format!("{label}{at}");
        }
    }

    Ok(GradSuiteReport {
        trials,
        n_checked,
        max_rel_err,
        worst,
    })
}

/// Run [`grad_check`] over a graph builder: the same closure defines both
/// the backward pass and the pure loss the ±ε probes re-evaluate.
fn fd_audit(
    ps: &mut ParamSet,
    build: &dyn Fn(&ParamSet, &mut Tape) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    grad_check(
        ps,
        GRAD_EPS,
        |ps| {
            let mut tape = Tape::new();
            let loss = build(ps, &mut tape)?;
            let v = tape.value(loss).item();
            tape.backward(loss, 1.0, ps)?;
            Ok(v)
        },
        |ps| {
            let mut tape = Tape::new();
            let loss = build(ps, &mut tape)?;
            Ok(tape.value(loss).item())
        },
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("dims match data length")
}

/// Reduce an r×c node to a scalar through fixed random left/right probes,
/// so every output element reaches the loss with its own weight.
fn probe_scalar(tape: &mut Tape, y: NodeId, left: &Tensor, right: &Tensor) -> Result<NodeId> {
    let l = tape.leaf(left.clone());
    let r = tape.leaf(right.clone());
    let ly = tape.matmul(l, y)?;
    tape.matmul(ly, r)
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let p = LinearP {
        w: ps.add_xavier("w", 3, 4, rng)?,
        b: ps.add_xavier("b", 1, 3, rng)?,
    };
    let x = ps.add_xavier("x", 2, 4, rng)?;
    let left = rand_tensor(rng, 1, 2);
    let right = rand_tensor(rng, 3, 1);
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let xn = tape.param(ps, x);
        let y = linear(tape, ps, xn, &p)?;
        probe_scalar(tape, y, &left, &right)
    };
    fd_audit(&mut ps, &build)
}

fn check_tanh_chain(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let p1 = LinearP {
        w: ps.add_xavier("w1", 4, 3, rng)?,
        b: ps.add_xavier("b1", 1, 4, rng)?,
    };
    let p2 = LinearP {
        w: ps.add_xavier("w2", 2, 4, rng)?,
        b: ps.add_xavier("b2", 1, 2, rng)?,
    };
    let x = ps.add_xavier("x", 2, 3, rng)?;
    let left = rand_tensor(rng, 1, 2);
    let right = rand_tensor(rng, 2, 1);
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let xn = tape.param(ps, x);
        let h = linear(tape, ps, xn, &p1)?;
        let h = tape.tanh(h);
        let y = linear(tape, ps, h, &p2)?;
        let y = tape.tanh(y);
        probe_scalar(tape, y, &left, &right)
    };
    fd_audit(&mut ps, &build)
}

/// Softmax, row indexing, scalar scaling, addition, and the ranking loss
/// in one graph: loss = (1 + α₁) · CE(scaled scores, target).
fn check_softmax_scalar_ops(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let p = LinearP {
        w: ps.add_xavier("w", 5, 4, rng)?,
        b: ps.add_xavier("b", 1, 5, rng)?,
    };
    let x = ps.add_xavier("x", 1, 4, rng)?;
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let xn = tape.param(ps, x);
        let scores = linear(tape, ps, xn, &p)?; // 1 × 5
        let scaled = tape.scale(scores, 1.7);
        let (alpha, _) = tape.softmax_rows(scaled, None)?;
        let a1 = tape.index(alpha, 1)?;
        let ce = tape.neg_log_softmax(scaled, 3)?;
        let scaled_ce = tape.scale_by_scalar(a1, ce)?;
        tape.add(scaled_ce, ce)
    };
    fd_audit(&mut ps, &build)
}

fn check_att_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let p = AttPoolP {
        w: ps.add_xavier("w", 2, 3, rng)?,
        b: ps.add_xavier("b", 1, 2, rng)?,
        v: ps.add_xavier("v", 1, 2, rng)?,
    };
    let x = ps.add_xavier("x", 4, 3, rng)?;
    let mask = vec![true, true, false, true];
    let right = rand_tensor(rng, 3, 1);
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let xn = tape.param(ps, x);
        let (u, _) = att_pool(tape, ps, xn, &p, Some(&mask))?;
        let r = tape.leaf(right.clone());
        tape.matmul(u, r)
    };
    fd_audit(&mut ps, &build)
}

/// Multi-head attention with a column-concatenated query/key input wider
/// than the value input — the exact asymmetry the dwell-concat encoder
/// relies on.
fn check_mha_concat(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, d1, d2, dv, heads, a) = (3usize, 2usize, 2usize, 3usize, 2usize, 2usize);
    let dq = d1 + d2;
    let mut ps = ParamSet::new();
    let p = MhaP {
        wq: (0..heads)
            .map(|h| ps.add_xavier(&format!("wq{h}"), a, dq, rng))
            .collect::<Result<_>>()?,
        wk: (0..heads)
            .map(|h| ps.add_xavier(&format!("wk{h}"), a, dq, rng))
            .collect::<Result<_>>()?,
        wv: (0..heads)
            .map(|h| ps.add_xavier(&format!("wv{h}"), a, dv, rng))
            .collect::<Result<_>>()?,
        wo: ps.add_xavier("wo", heads * a, heads * a, rng)?,
    };
    let x1 = ps.add_xavier("x1", n, d1, rng)?;
    let x2 = ps.add_xavier("x2", n, d2, rng)?;
    let v_in = ps.add_xavier("v_in", n, dv, rng)?;
    let left = rand_tensor(rng, 1, n);
    let right = rand_tensor(rng, heads * a, 1);
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let a1 = tape.param(ps, x1);
        let a2 = tape.param(ps, x2);
        let qk = tape.concat_cols(a1, a2)?;
        let vn = tape.param(ps, v_in);
        let out = multi_head_attention(tape, ps, qk, qk, vn, &p, None)?;
        probe_scalar(tape, out, &left, &right)
    };
    fd_audit(&mut ps, &build)
}

fn check_embed_dropout(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut ps = ParamSet::new();
    let table = ps.add_xavier("table", 6, 3, rng)?;
    let ids = vec![1usize, 4, 1, 5, 2];
    let left = rand_tensor(rng, 1, 5);
    let right = rand_tensor(rng, 3, 1);
    // Fixed mask seed: every ±ε probe must see the same dropout pattern.
    let mask_seed: u64 = rng.random();
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let tn = tape.param(ps, table);
        let e = tape.embed_rows(tn, &ids)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let d = tape.dropout(e, 0.3, true, &mut drop_rng)?;
        probe_scalar(tape, d, &left, &right)
    };
    fd_audit(&mut ps, &build)
}

/// Full forward + ranking loss for one variant, in training mode with
/// dropout live, at the smallest dimensions that still exercise every
/// parameter (for dwew: at least one long read and one short one, so both
/// encoder passes and the gate all receive gradient).
fn check_variant(variant: Variant, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let cfg = EncoderConfig {
        variant,
        d: 6,
        d_dw: 3,
        h: 2,
        a: 3,
        attpool_dim: Some(4),
        max_history: 5,
        theta_s: 5.0,
        k_negatives: 2,
        dropout: 0.1,
        dwell_variant: DwellVariant::Literal,
    };
    let model = Model::new(&cfg, rng.random())?;
    let mut rows = rand_tensor(rng, cfg.max_history, cfg.d);
    for c in 0..cfg.d {
        rows.set(4, c, 0.0); // padding row, as encode_history would leave it
    }
    let dwells = [
        RawDwell::Known(10.0),
        RawDwell::Known(2.0),
        RawDwell::Known(90.0),
        RawDwell::Unknown,
    ];
    let mut buckets = vec![0u8; cfg.max_history];
    for (i, &dw) in dwells.iter().enumerate() {
        buckets[i] = discretize_with(dw, cfg.dwell_variant)?.id();
    }
    let mut all_dwells = vec![RawDwell::Unknown; cfg.max_history];
    all_dwells[..dwells.len()].copy_from_slice(&dwells);
    let eh = EncodedHistory {
        rows,
        buckets,
        dwells: all_dwells,
        n_valid: dwells.len(),
    };
    let cands = rand_tensor(rng, cfg.k_negatives + 1, cfg.d);
    let mask_seed: u64 = rng.random();
    let idx = model.idx.clone();
    let build = move |ps: &ParamSet, tape: &mut Tape| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let scores = forward_scores(&cfg, &idx, ps, tape, &eh, &cands, true, &mut drop_rng)?;
        let row = tape.transpose(scores);
        let ce = tape.neg_log_softmax(row, 0)?;
        // Cross-entropy alone is invariant to a constant shift of every
        // score, which makes the candidate projection's bias a zero-
        // gradient direction — the audit would compare rounding noise
        // against rounding noise there. A lightly weighted tap of the raw
        // clicked score breaks the symmetry so every parameter element
        // has a measurable direction, while the CE path stays checked.
        let s0 = tape.index(row, 0)?;
        let tap = tape.scale(s0, 0.37);
        tape.add(ce, tap)
    };
    let mut ps = model.params;
    fd_audit(&mut ps, &build)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::newsrep::NewsEmbedding;

    fn tiny_cfg(variant: Variant) -> EncoderConfig {
        EncoderConfig {
            variant,
            d: 8,
            d_dw: 4,
            h: 2,
            a: 4,
            attpool_dim: Some(6),
            max_history: 6,
            theta_s: 5.0,
            k_negatives: 3,
            dropout: 0.2,
            dwell_variant: DwellVariant::Literal,
        }
    }

    /// History with random rows and the given dwells, padded to the window.
    fn eh_from(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, dwells: &[RawDwell]) -> EncodedHistory {
        assert!(dwells.len() <= cfg.max_history);
        let mut rows = Tensor::zeros(cfg.max_history, cfg.d);
        let mut buckets = vec![0u8; cfg.max_history];
        let mut all = vec![RawDwell::Unknown; cfg.max_history];
        for (i, &dw) in dwells.iter().enumerate() {
            for c in 0..cfg.d {
                rows.set(i, c, rng.random_range(-1.0..1.0));
            }
            buckets[i] = discretize_with(dw, cfg.dwell_variant).unwrap().id();
            all[i] = dw;
        }
        EncodedHistory {
            rows,
            buckets,
            dwells: all,
            n_valid: dwells.len(),
        }
    }

    fn eval_user(model: &Model, eh: &EncodedHistory) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model.user_forward(&mut tape, eh, false, &mut rng).unwrap();
        tape.value(fwd.user).as_slice().to_vec()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn config_validation_names_the_offending_field() {
        let mut cfg = tiny_cfg(Variant::BaseMha);
        cfg.h = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains('h')));
        let mut cfg = tiny_cfg(Variant::DweW);
        cfg.theta_s = 0.0;
        assert!(cfg.validate().is_err());
        cfg.theta_s = 5.0;
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout = 0.2;
        cfg.k_negatives = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg(Variant::DweA).validate().is_ok());
    }

    #[test]
    fn variant_names_round_trip_via_serde_and_fromstr() {
        for v in Variant::ALL {
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
            let back: Variant = serde_json::from_str(&json).unwrap();
            assert_eq!(back, v);
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("dwell_net".parse::<Variant>().is_err());
    }

    #[test]
    fn encode_history_packs_recent_clicks_and_buckets() {
        let mut store = EmbeddingStore::new(4);
        for i in 0..8 {
            store
                .insert(NewsEmbedding {
                    id: format!("n{i}"),
                    vector: vec![i as f64, 0.0, 0.0, 1.0],
                })
                .unwrap();
        }
        let mut cfg = tiny_cfg(Variant::DweA);
        cfg.d = 4;
        cfg.max_history = 4;
        let history: Vec<ClickRecord> = (0..6)
            .map(|i| ClickRecord {
                nid: format!("n{i}"),
                dwell: if i == 5 {
                    RawDwell::Unknown
                } else {
                    RawDwell::Known(7.0)
                },
            })
            .collect();
        // Six clicks into a four-row window: only the last four survive.
        let eh = encode_history(&history, &store, &cfg).unwrap();
        assert_eq!(eh.n_valid, 4);
        assert_eq!(eh.rows.get(0, 0), 2.0);
        assert_eq!(eh.rows.get(3, 0), 5.0);
        assert_eq!(eh.buckets, vec![4, 4, 4, 1]); // 7 s reads, then unknown
        assert_eq!(eh.valid_mask(), vec![true, true, true, true]);

        // Shorter history: valid prefix plus zero padding.
        let eh = encode_history(&history[..2], &store, &cfg).unwrap();
        assert_eq!(eh.n_valid, 2);
        assert_eq!(eh.buckets[2..], [0, 0]);
        assert!(eh.rows.row_slice(3).iter().all(|&v| v == 0.0));
        assert!(!eh.is_empty());

        // Unknown id fails loudly with the id in the message.
        let missing = vec![ClickRecord {
            nid: "ghost".into(),
            dwell: RawDwell::Unknown,
        }];
        let err = encode_history(&missing, &store, &cfg).unwrap_err();
        assert!(err.to_string().contains("ghost"));

        // Store/encoder dimension mismatch is a shape error.
        cfg.d = 5;
        assert!(matches!(
            encode_history(&history, &store, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn split_effective_keeps_only_strictly_long_known_reads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg(Variant::DweW);
        let eh = eh_from(
            &mut rng,
            &cfg,
            &[
                RawDwell::Known(3.0),
                RawDwell::Known(10.0),
                RawDwell::Unknown,
                RawDwell::Known(60.0),
                RawDwell::Known(5.0), // exactly the threshold: not effective
            ],
        );
        let (full, eff) = split_effective(&eh, 5.0);
        assert_eq!(full.n_valid, 5);
        assert_eq!(full.buckets, eh.buckets);
        assert_eq!(eff.n_valid, 2);
        assert_eq!(eff.rows.row_slice(0), eh.rows.row_slice(1));
        assert_eq!(eff.rows.row_slice(1), eh.rows.row_slice(3));
        assert_eq!(eff.buckets[..2], [eh.buckets[1], eh.buckets[3]]);
        assert_eq!(
            eff.dwells[..2],
            [RawDwell::Known(10.0), RawDwell::Known(60.0)]
        );
        assert!(eff.rows.row_slice(2).iter().all(|&v| v == 0.0));
        assert_eq!(eff.buckets[2..], [0, 0, 0, 0]);

        let all_short = eh_from(&mut rng, &cfg, &[RawDwell::Known(1.0), RawDwell::Unknown]);
        let (_, eff) = split_effective(&all_short, 5.0);
        assert!(eff.is_empty());
    }

    #[test]
    fn empty_history_yields_zero_user_and_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 11).unwrap();
            let eh = eh_from(&mut rng, &cfg, &[]);
            assert!(eh.is_empty());
            let mut tape = Tape::new();
            let fwd = model.user_forward(&mut tape, &eh, false, &mut rng).unwrap();
            assert!(fwd.empty);
            assert!(tape.value(fwd.user).as_slice().iter().all(|&v| v == 0.0));
            let cands = rand_tensor(&mut rng, 4, cfg.d);
            let scores = model.score_candidates(&eh, &cands).unwrap();
            assert_eq!(scores, vec![0.0; 4], "zero user vector scores nothing");
        }
    }

    #[test]
    fn score_candidates_rejects_wrong_width() {
        let cfg = tiny_cfg(Variant::BaseMha);
        let model = Model::new(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eh = eh_from(&mut rng, &cfg, &[RawDwell::Known(8.0)]);
        let cands = rand_tensor(&mut rng, 2, cfg.d + 1);
        assert!(matches!(
            model.score_candidates(&eh, &cands),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn padding_contents_never_reach_the_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 21).unwrap();
            let eh = eh_from(
                &mut rng,
                &cfg,
                &[
                    RawDwell::Known(30.0),
                    RawDwell::Known(2.0),
                    RawDwell::Unknown,
                ],
            );
            let mut vandalized = eh.clone();
            for i in eh.n_valid..cfg.max_history {
                for c in 0..cfg.d {
                    vandalized.rows.set(i, c, rng.random_range(-9.0..9.0));
                }
                vandalized.buckets[i] = 7;
                vandalized.dwells[i] = RawDwell::Known(120.0);
            }
            assert_eq!(
                eval_user(&model, &eh),
                eval_user(&model, &vandalized),
                "{variant}: garbage in padding rows leaked into the user vector"
            );
        }
    }

    #[test]
    fn baselines_are_blind_to_dwell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for variant in [Variant::BaseAttPool, Variant::BaseMha] {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 31).unwrap();
            let eh = eh_from(
                &mut rng,
                &cfg,
                &[
                    RawDwell::Known(45.0),
                    RawDwell::Known(1.0),
                    RawDwell::Known(300.0),
                ],
            );
            assert_eq!(
                eval_user(&model, &eh),
                eval_user(&model, &eh.mask_dwell()),
                "{variant}: masking dwell must change nothing"
            );
        }
    }

    #[test]
    fn dwea_responds_to_buckets_except_for_a_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_cfg(Variant::DweA);
        let model = Model::new(&cfg, 41).unwrap();

        // Two rows: the attention logits depend on the concatenated
        // bucket embeddings, so masking them moves the user vector.
        let eh = eh_from(
            &mut rng,
            &cfg,
            &[RawDwell::Known(45.0), RawDwell::Known(1.0)],
        );
        let diff = max_abs_diff(
            &eval_user(&model, &eh),
            &eval_user(&model, &eh.mask_dwell()),
        );
        assert!(diff > 1e-12, "bucket change had no effect on dwea ({diff})");

        // One row: softmax over a single logit is 1 regardless of the
        // bucket, so the vector cannot move.
        let eh1 = eh_from(&mut rng, &cfg, &[RawDwell::Known(45.0)]);
        assert_eq!(
            eval_user(&model, &eh1),
            eval_user(&model, &eh1.mask_dwell())
        );
    }

    #[test]
    fn user_vectors_ignore_history_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 51).unwrap();
            let dwells = [
                RawDwell::Known(45.0),
                RawDwell::Known(1.0),
                RawDwell::Unknown,
                RawDwell::Known(90.0),
                RawDwell::Known(7.0),
            ];
            let eh = eh_from(&mut rng, &cfg, &dwells);
            let mut reversed = eh.clone();
            for i in 0..eh.n_valid {
                let j = eh.n_valid - 1 - i;
                for c in 0..cfg.d {
                    reversed.rows.set(i, c, eh.rows.get(j, c));
                }
                reversed.buckets[i] = eh.buckets[j];
                reversed.dwells[i] = eh.dwells[j];
            }
            let diff = max_abs_diff(&eval_user(&model, &eh), &eval_user(&model, &reversed));
            assert!(
                diff < 1e-9,
                "{variant}: user vector moved {diff} under history permutation"
            );
        }
    }

    #[test]
    fn single_click_attpool_user_is_the_projected_row() {
        let cfg = tiny_cfg(Variant::BaseAttPool);
        let model = Model::new(&cfg, 61).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let eh = eh_from(&mut rng, &cfg, &[RawDwell::Known(12.0)]);
        // Pooling one row is a no-op, so u = x·Wᵀ + b exactly.
        let x = eh.rows.top_rows(1);
        let w = &model.params.get(model.idx.news_proj.w).value;
        let b = &model.params.get(model.idx.news_proj.b).value;
        let expect = crate::nncore::tensor::add_row(
            &crate::nncore::tensor::matmul(&x, &crate::nncore::tensor::transpose(w)).unwrap(),
            b,
        )
        .unwrap();
        assert_eq!(eval_user(&model, &eh), expect.as_slice());
    }

    #[test]
    fn dwew_gate_is_a_convex_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = tiny_cfg(Variant::DweW);
        let model = Model::new(&cfg, 71).unwrap();
        let eh = eh_from(
            &mut rng,
            &cfg,
            &[
                RawDwell::Known(45.0),
                RawDwell::Known(1.0),
                RawDwell::Known(90.0),
            ],
        );
        let mut tape = Tape::new();
        let fwd = model.user_forward(&mut tape, &eh, false, &mut rng).unwrap();
        let gate = tape.value(fwd.gate.expect("gated path"));
        let (ge, go) = (gate.get(0, 0), gate.get(0, 1));
        assert!(ge > 0.0 && go > 0.0);
        assert!((ge + go - 1.0).abs() < 1e-12, "gate must normalize");
        let u = tape.value(fwd.user).as_slice().to_vec();
        let ue = tape.value(fwd.user_effective.unwrap()).as_slice().to_vec();
        let uf = tape.value(fwd.user_full.unwrap()).as_slice().to_vec();
        let blended: Vec<f64> = ue.iter().zip(&uf).map(|(&e, &f)| ge * e + go * f).collect();
        assert!(max_abs_diff(&u, &blended) < 1e-15);
    }

    #[test]
    fn dwew_equal_gate_logits_give_the_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = tiny_cfg(Variant::DweW);
        let mut model = Model::new(&cfg, 81).unwrap();
        let out = model.idx.gate_out.unwrap();
        model.params.get_mut(out.w).value.fill(0.0);
        model.params.get_mut(out.b).value.fill(0.0);
        let eh = eh_from(
            &mut rng,
            &cfg,
            &[RawDwell::Known(45.0), RawDwell::Known(1.0)],
        );
        let mut tape = Tape::new();
        let fwd = model.user_forward(&mut tape, &eh, false, &mut rng).unwrap();
        let gate = tape.value(fwd.gate.unwrap());
        assert_eq!(gate.get(0, 0), 0.5);
        assert_eq!(gate.get(0, 1), 0.5);
        let u = tape.value(fwd.user).as_slice().to_vec();
        let ue = tape.value(fwd.user_effective.unwrap()).as_slice().to_vec();
        let uf = tape.value(fwd.user_full.unwrap()).as_slice().to_vec();
        let mid: Vec<f64> = ue.iter().zip(&uf).map(|(&e, &f)| 0.5 * (e + f)).collect();
        assert!(max_abs_diff(&u, &mid) < 1e-15);
    }

    #[test]
    fn dwew_with_every_read_long_collapses_to_the_full_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = tiny_cfg(Variant::DweW);
        let model = Model::new(&cfg, 91).unwrap();
        let eh = eh_from(
            &mut rng,
            &cfg,
            &[
                RawDwell::Known(45.0),
                RawDwell::Known(100.0),
                RawDwell::Known(9.0),
            ],
        );
        let mut tape = Tape::new();
        let fwd = model.user_forward(&mut tape, &eh, false, &mut rng).unwrap();
        // Shared weights on identical inputs: the two encoder passes are
        // the same computation, so their outputs match bit for bit.
        assert_eq!(
            tape.value(fwd.user_effective.unwrap()).as_slice(),
            tape.value(fwd.user_full.unwrap()).as_slice()
        );
        // And any convex gate over equal vectors returns that vector.
        let diff = max_abs_diff(
            tape.value(fwd.user).as_slice(),
            tape.value(fwd.user_full.unwrap()).as_slice(),
        );
        assert!(diff < 1e-15);
    }

    #[test]
    fn dwew_without_long_reads_bypasses_the_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = tiny_cfg(Variant::DweW);
        let model = Model::new(&cfg, 101).unwrap();
        let eh = eh_from(
            &mut rng,
            &cfg,
            &[
                RawDwell::Known(1.0),
                RawDwell::Unknown,
                RawDwell::Known(5.0),
            ],
        );
        let mut tape = Tape::new();
        let fwd = model.user_forward(&mut tape, &eh, false, &mut rng).unwrap();
        assert!(fwd.gate.is_none());
        assert!(fwd.user_effective.is_none());
        assert_eq!(fwd.user, fwd.user_full.unwrap(), "bypass reuses the node");

        // Masking dwell erases all long reads, so a masked dwew forward
        // always takes this bypass — and still produces finite output.
        let long = eh_from(
            &mut rng,
            &cfg,
            &[RawDwell::Known(45.0), RawDwell::Known(2.0)],
        );
        let mut tape = Tape::new();
        let fwd = model
            .user_forward(&mut tape, &long.mask_dwell(), false, &mut rng)
            .unwrap();
        assert!(fwd.gate.is_none());
        assert!(tape
            .value(fwd.user)
            .as_slice()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn sample_loss_matches_frozen_values() {
        // Uniform scores: every candidate equally likely.
        for k in [1usize, 2, 4, 8] {
            let loss = sample_loss(0.3, &vec![0.3; k]).unwrap();
            assert!((loss - ((k + 1) as f64).ln()).abs() < 1e-12);
        }
        // Hand-checked asymmetric case.
        let loss = sample_loss(1.0, &[0.0, 0.0]).unwrap();
        assert!((loss - 0.5514447139320511).abs() < 1e-15);
        // A dominant positive drives the loss toward zero.
        assert!(sample_loss(60.0, &[0.0, 0.0]).unwrap() < 1e-12);
        // Loss is never negative.
        assert!(sample_loss(-3.0, &[4.0, 1.0]).unwrap() > 0.0);
        // Degenerate inputs fail.
        assert!(sample_loss(1.0, &[]).is_err());
        assert!(sample_loss(f64::NAN, &[0.0]).is_err());
        assert!(sample_loss(0.0, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn tape_loss_agrees_with_the_standalone_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 111).unwrap();
            let eh = eh_from(
                &mut rng,
                &cfg,
                &[
                    RawDwell::Known(45.0),
                    RawDwell::Known(1.0),
                    RawDwell::Unknown,
                ],
            );
            let cands = rand_tensor(&mut rng, cfg.k_negatives + 1, cfg.d);
            let scores = model.score_candidates(&eh, &cands).unwrap();
            let pure = sample_loss(scores[0], &scores[1..]).unwrap();
            let mut tape = Tape::new();
            let node = model
                .sample_loss_node(&mut tape, &eh, &cands, false, &mut rng)
                .unwrap();
            let traced = tape.value(node).item();
            assert!(
                (pure - traced).abs() < 1e-12,
                "{variant}: tape loss {traced} vs standalone {pure}"
            );
        }
    }

    #[test]
    fn forwards_are_deterministic_in_eval_and_seed_bound_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 121).unwrap();
            let eh = eh_from(
                &mut rng,
                &cfg,
                &[RawDwell::Known(45.0), RawDwell::Known(1.0)],
            );
            assert_eq!(eval_user(&model, &eh), eval_user(&model, &eh));

            let train_user = |seed: u64| {
                let mut tape = Tape::new();
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let fwd = model.user_forward(&mut tape, &eh, true, &mut r).unwrap();
                tape.value(fwd.user).as_slice().to_vec()
            };
            assert_eq!(train_user(5), train_user(5), "same dropout seed");
            assert_ne!(train_user(5), train_user(6), "different dropout mask");
        }
    }

    #[test]
    fn user_vector_has_head_times_dim_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 131).unwrap();
            let eh = eh_from(&mut rng, &cfg, &[RawDwell::Known(8.0)]);
            assert_eq!(eval_user(&model, &eh).len(), cfg.m());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_scores_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let model = Model::new(&cfg, 141).unwrap();
            let path = dir.path().join(format!("{variant}.nrck"));
            model.save(&path).unwrap();
            let loaded = Model::load(&cfg, &path).unwrap();
            for (a, b) in model.params.iter().zip(loaded.params.iter()) {
                assert_eq!(a.name, b.name);
                assert_eq!(a.value.as_slice(), b.value.as_slice());
            }
            let eh = eh_from(
                &mut rng,
                &cfg,
                &[RawDwell::Known(45.0), RawDwell::Known(2.0)],
            );
            let cands = rand_tensor(&mut rng, 3, cfg.d);
            assert_eq!(
                model.score_candidates(&eh, &cands).unwrap(),
                loaded.score_candidates(&eh, &cands).unwrap()
            );
        }
    }

    #[test]
    fn loading_rejects_mismatched_variant_or_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nrck");
        Model::new(&tiny_cfg(Variant::DweA), 151)
            .unwrap()
            .save(&path)
            .unwrap();
        // A different variant owns a different parameter set.
        let err = Model::load(&tiny_cfg(Variant::BaseMha), &path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        // Same variant, drifted dimension: the offending name is reported.
        let mut cfg = tiny_cfg(Variant::DweA);
        cfg.d_dw = 3;
        let err = Model::load(&cfg, &path).unwrap_err();
        assert!(err.to_string().contains("shape") || err.to_string().contains("dwell_table"));
    }

    #[test]
    fn loading_repins_the_padding_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nrck");
        let cfg = tiny_cfg(Variant::DweW);
        let mut model = Model::new(&cfg, 161).unwrap();
        // Sabotage the invariant before saving; load must restore it.
        let t = model.idx.dwell_table.unwrap();
        model.params.get_mut(t).value.set(0, 0, 9.0);
        model.save(&path).unwrap();
        let loaded = Model::load(&cfg, &path).unwrap();
        let row0 = loaded.params.get(t).value.row_slice(0).to_vec();
        assert!(row0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pinning_zeroes_only_the_padding_row_gradient() {
        let cfg = tiny_cfg(Variant::DweA);
        let mut model = Model::new(&cfg, 171).unwrap();
        let t = model.idx.dwell_table.unwrap();
        model.params.get_mut(t).grad.fill(3.5);
        model.pin_padding_gradients();
        let g = &model.params.get(t).grad;
        assert!(g.row_slice(0).iter().all(|&v| v == 0.0));
        assert!(g.row_slice(1).iter().all(|&v| v == 3.5));
    }

    #[test]
    fn long_read_share_of_generated_histories_matches_the_target_band() {
        let gen_cfg = crate::datagen::GeneratorConfig::default();
        let (news, impressions) = crate::datagen::generate_corpus(&gen_cfg, 42).unwrap();
        let store = crate::newsrep::synth_embed_store(&news, 16, 7, 0.05).unwrap();
        let mut cfg = tiny_cfg(Variant::DweW);
        cfg.d = 16;
        cfg.max_history = 50;
        let (mut known, mut effective) = (0usize, 0usize);
        for imp in &impressions {
            let eh = encode_history(&imp.history, &store, &cfg).unwrap();
            let (_, eff) = split_effective(&eh, 5.0);
            known += eh.dwells[..eh.n_valid]
                .iter()
                .filter(|d| !d.is_unknown())
                .count();
            effective += eff.n_valid;
        }
        let ratio = effective as f64 / known as f64;
        assert!(
            (0.87..=0.91).contains(&ratio),
            "long-read share {ratio:.4} outside [0.87, 0.91]"
        );
    }

    #[test]
    fn candidate_matrix_stacks_in_order_and_fails_on_unknown_ids() {
        let mut store = EmbeddingStore::new(3);
        for (id, v) in [("a", 1.0), ("b", 2.0)] {
            store
                .insert(NewsEmbedding {
                    id: id.into(),
                    vector: vec![v, 0.0, 0.0],
                })
                .unwrap();
        }
        let m = candidate_matrix(&store, &["b", "a"]).unwrap();
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(1, 0), 1.0);
        assert!(candidate_matrix(&store, &["c"]).is_err());
    }

    #[test]
    fn gradient_suite_covers_all_targets_and_passes() {
        // One full round-robin: six layer targets + four variants.
        let report = gradient_suite(10, 7_777).unwrap();
        assert!(report.n_checked > 1_000, "suite barely checked anything");
        assert!(
            report.passes(1e-4),
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst
        );
    }
}
