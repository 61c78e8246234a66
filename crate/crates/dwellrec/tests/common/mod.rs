//! Shared fixtures for the integration suites: a tiny encoder
//! configuration, lazily built models, raw-history generators, and the
//! invariance checks that both the property suite and the acceptance
//! suite exercise.

#![allow(dead_code)]

use dwellrec::dwell::{discretize_with, RawDwell};
use dwellrec::encoders::{EncodedHistory, EncoderConfig, Model, Variant};
use dwellrec::nncore::layers::{att_pool, AttPoolP};
use dwellrec::nncore::tape::{ParamSet, Tape};
use dwellrec::nncore::tensor::{softmax_rows, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

pub const TINY_D: usize = 6;
pub const TINY_H: usize = 6;
pub const MAX_VALID: usize = 5;

pub fn tiny_cfg(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        variant,
        d: TINY_D,
        d_dw: 3,
        h: 2,
        a: 3,
        attpool_dim: Some(4),
        max_history: TINY_H,
        theta_s: 5.0,
        k_negatives: 2,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

static MODELS: OnceLock<Vec<Model>> = OnceLock::new();

/// One tiny model per variant, built once and shared across cases so the
/// randomness under test comes from the histories, not the weights.
pub fn models() -> &'static [Model] {
    MODELS.get_or_init(|| {
        Variant::ALL
            .iter()
            .map(|&v| Model::new(&tiny_cfg(v), 11).expect("tiny model"))
            .collect()
    })
}

pub fn model_for(variant: Variant) -> &'static Model {
    models()
        .iter()
        .find(|m| m.cfg.variant == variant)
        .expect("all variants are built")
}

/// Evaluation-mode user vector for a history.
pub fn user_vec(model: &Model, eh: &EncodedHistory) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let uf = model
        .user_forward(&mut tape, eh, false, &mut rng)
        .expect("forward");
    tape.value(uf.user).as_slice().to_vec()
}

/// A history before encoding: one embedding row and one raw dwell per
/// click, most recent last.
#[derive(Clone, Debug)]
pub struct RawHist {
    pub rows: Vec<Vec<f64>>,
    pub dwells: Vec<RawDwell>,
}

impl RawHist {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn permuted(&self, perm: &[usize]) -> RawHist {
        RawHist {
            rows: perm.iter().map(|&i| self.rows[i].clone()).collect(),
            dwells: perm.iter().map(|&i| self.dwells[i]).collect(),
        }
    }

    pub fn encoded(&self, cfg: &EncoderConfig) -> EncodedHistory {
        let (h, d) = (cfg.max_history, cfg.d);
        let n = self.rows.len().min(h);
        let mut rows = Tensor::zeros(h, d);
        let mut buckets = vec![0u8; h];
        let mut dwells = vec![RawDwell::Unknown; h];
        for i in 0..n {
            for c in 0..d {
                rows.set(i, c, self.rows[i][c]);
            }
            buckets[i] = discretize_with(self.dwells[i], cfg.dwell_variant)
                .expect("valid dwell")
                .id();
            dwells[i] = self.dwells[i];
        }
        EncodedHistory {
            rows,
            buckets,
            dwells,
            n_valid: n,
        }
    }

    /// Same history, but with all padding slots filled with adversarial
    /// finite garbage instead of zeros: row values `fill`, a real bucket
    /// id, and a long known dwell.
    pub fn encoded_with_dirty_padding(
        &self,
        cfg: &EncoderConfig,
        fill: f64,
        bucket: u8,
    ) -> EncodedHistory {
        let mut eh = self.encoded(cfg);
        let d = cfg.d;
        for i in eh.n_valid..cfg.max_history {
            for c in 0..d {
                eh.rows.set(i, c, fill);
            }
            eh.buckets[i] = bucket;
            eh.dwells[i] = RawDwell::Known(999.0);
        }
        eh
    }
}

pub fn dwell_strategy() -> impl Strategy<Value = RawDwell> {
    prop_oneof![
        1 => Just(RawDwell::Unknown),
        4 => (0.0f64..700.0).prop_map(RawDwell::Known),
    ]
}

/// Histories of 1..=MAX_VALID clicks in the tiny embedding space.
pub fn hist_strategy() -> impl Strategy<Value = RawHist> {
    (1..=MAX_VALID).prop_flat_map(|n| {
        (
            proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, TINY_D), n),
            proptest::collection::vec(dwell_strategy(), n),
        )
            .prop_map(|(rows, dwells)| RawHist { rows, dwells })
    })
}

/// A history plus a random permutation of its click indices.
pub fn hist_and_perm() -> impl Strategy<Value = (RawHist, Vec<usize>)> {
    hist_strategy().prop_flat_map(|hist| {
        let n = hist.len();
        let idx: Vec<usize> = (0..n).collect();
        (Just(hist), Just(idx).prop_shuffle())
    })
}

// --- The five invariance checks (panic on violation) ---

/// Reordering a user's clicks (dwells riding along) must not move any
/// variant's user vector.
pub fn check_permutation_invariance(hist: &RawHist, perm: &[usize]) {
    for model in models() {
        let a = user_vec(model, &hist.encoded(&model.cfg));
        let b = user_vec(model, &hist.permuted(perm).encoded(&model.cfg));
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert!(
                (x - y).abs() <= 1e-9,
                "{}: coordinate {i} moved under permutation: {x} vs {y}",
                model.cfg.variant
            );
        }
    }
}

/// Garbage in the padding slots (rows, buckets, dwells) must not change
/// any variant's user vector at all.
pub fn check_padding_non_influence(hist: &RawHist, fill: f64, bucket: u8) {
    for model in models() {
        let clean = user_vec(model, &hist.encoded(&model.cfg));
        let dirty = user_vec(
            model,
            &hist.encoded_with_dirty_padding(&model.cfg, fill, bucket),
        );
        assert_eq!(
            clean,
            dirty,
            "{}: padding contents leaked into the user vector",
            model.cfg.variant
        );
    }
}

/// The two-way blend weights are a probability pair whenever the gate
/// engages (at least one click past the threshold guarantees that).
pub fn check_gate_normalization(hist: &RawHist, long_dwell: f64) {
    let model = model_for(Variant::DweW);
    let mut hist = hist.clone();
    hist.dwells[0] = RawDwell::Known(long_dwell);
    let eh = hist.encoded(&model.cfg);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let uf = model
        .user_forward(&mut tape, &eh, false, &mut rng)
        .expect("forward");
    let gate = uf.gate.expect("a long-dwell click engages the gate");
    let g = tape.value(gate);
    assert_eq!(g.shape(), [1, 2]);
    let (ge, go) = (g.get(0, 0), g.get(0, 1));
    assert!(ge >= 0.0 && go >= 0.0, "gate components negative: {ge}, {go}");
    assert!(
        (ge + go - 1.0).abs() <= 1e-9,
        "gate does not normalize: {ge} + {go}"
    );
}

/// Row softmax: valid positions form a distribution, masked positions are
/// exactly zero, and an all-masked row comes back flagged and zeroed.
pub fn check_softmax_rows(values: &[Vec<f64>], mask: Option<&[bool]>) {
    let rows = values.len();
    let cols = values[0].len();
    let flat: Vec<f64> = values.iter().flatten().copied().collect();
    let x = Tensor::from_vec(rows, cols, flat).expect("rectangular input");
    let (out, flags) = softmax_rows(&x, mask).expect("softmax");
    let all_masked = mask.is_some_and(|m| m.iter().all(|v| !v));
    for r in 0..rows {
        assert_eq!(flags[r], all_masked);
        let mut sum = 0.0;
        for c in 0..cols {
            let w = out.get(r, c);
            if mask.is_some_and(|m| !m[c]) {
                assert_eq!(w, 0.0, "masked position ({r},{c}) got weight {w}");
            } else {
                assert!(w >= 0.0, "negative weight {w} at ({r},{c})");
                sum += w;
            }
        }
        if all_masked {
            assert_eq!(sum, 0.0);
        } else {
            assert!((sum - 1.0).abs() <= 1e-9, "row {r} sums to {sum}");
        }
    }
}

/// Attention pooling is a convex combination of the valid rows, so each
/// output coordinate stays inside the valid rows' coordinate-wise range.
pub fn check_att_pool_envelope(x_rows: &[Vec<f64>], param_seed: u64, mask: &[bool]) {
    assert!(mask.iter().any(|&v| v), "fixture must keep one valid row");
    let (n, d) = (x_rows.len(), x_rows[0].len());
    let a = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed);
    let mut ps = ParamSet::new();
    let p = AttPoolP {
        w: ps.add_xavier("w", a, d, &mut rng).expect("w"),
        b: ps.add_zeros("b", 1, a).expect("b"),
        v: ps.add_xavier("v", 1, a, &mut rng).expect("v"),
    };
    let flat: Vec<f64> = x_rows.iter().flatten().copied().collect();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(n, d, flat).expect("rectangular input"));
    let (pooled, all_masked) = att_pool(&mut tape, &ps, x, &p, Some(mask)).expect("att_pool");
    assert!(!all_masked);
    let u = tape.value(pooled);
    for c in 0..d {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (r, row) in x_rows.iter().enumerate() {
            if mask[r] {
                lo = lo.min(row[c]);
                hi = hi.max(row[c]);
            }
        }
        let got = u.get(0, c);
        assert!(
            got >= lo - 1e-9 && got <= hi + 1e-9,
            "coordinate {c} = {got} escapes the valid-row envelope [{lo}, {hi}]"
        );
    }
}
