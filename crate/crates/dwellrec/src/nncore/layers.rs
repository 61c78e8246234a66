//! Layer builders on top of the tape: linear maps, additive attention
//! pooling, and multi-head attention. Each is a thin composition of tape
//! primitives, so gradients come from the tape with nothing extra to derive.

use crate::error::Result;
use crate::nncore::tape::{NodeId, ParamSet, Tape};

/// Parameter indices for a dense map y = x·Wᵀ + b, W stored (out × in).
#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    pub w: usize,
    pub b: usize,
}

pub fn linear(tape: &mut Tape, ps: &ParamSet, x: NodeId, p: &LinearP) -> Result<NodeId> {
    let w = tape.param(ps, p.w);
    let b = tape.param(ps, p.b);
    let wt = tape.transpose(w);
    let xw = tape.matmul(x, wt)?;
    tape.add_row(xw, b)
}

/// Additive attention pooling: score each row i of X as vᵀ·tanh(W·xᵢ + b),
/// softmax the scores over valid rows, return the weighted row sum.
#[derive(Clone, Copy, Debug)]
pub struct AttPoolP {
    pub w: usize, // A × D
    pub b: usize, // 1 × A
    pub v: usize, // 1 × A
}

/// Returns the pooled 1×D vector and a flag that is true when every row was
/// masked out (the pooled vector is then exactly zero).
pub fn att_pool(
    tape: &mut Tape,
    ps: &ParamSet,
    x: NodeId,
    p: &AttPoolP,
    mask: Option<&[bool]>,
) -> Result<(NodeId, bool)> {
    let w = tape.param(ps, p.w);
    let b = tape.param(ps, p.b);
    let v = tape.param(ps, p.v);
    let wt = tape.transpose(w);
    let xw = tape.matmul(x, wt)?; // n × A
    let pre = tape.add_row(xw, b)?;
    let t = tape.tanh(pre);
    let tt = tape.transpose(t); // A × n
    let scores = tape.matmul(v, tt)?; // 1 × n
    let (alpha, flags) = tape.softmax_rows(scores, mask)?;
    let pooled = tape.matmul(alpha, x)?; // 1 × D
    Ok((pooled, flags[0]))
}

/// Per-head projection parameters plus the output projection.
/// Queries and keys may come from a wider feature space than values —
/// `wq`/`wk` are (a × dq), `wv` is (a × dv), `wo` is (h·a × h·a).
#[derive(Clone, Debug)]
pub struct MhaP {
    pub wq: Vec<usize>,
    pub wk: Vec<usize>,
    pub wv: Vec<usize>,
    pub wo: usize,
}

/// Scaled dot-product multi-head attention. `mask` marks valid key
/// positions; all query rows are computed (invalid ones are expected to be
/// pooled away downstream). Output is n × h·a.
pub fn multi_head_attention(
    tape: &mut Tape,
    ps: &ParamSet,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    p: &MhaP,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let heads = p.wq.len();
    debug_assert!(heads == p.wk.len() && heads == p.wv.len());
    let head_dim = ps.get(p.wq[0]).value.rows();
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut ctxs = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = tape.param(ps, p.wq[h]);
        let wk = tape.param(ps, p.wk[h]);
        let wv = tape.param(ps, p.wv[h]);
        let wqt = tape.transpose(wq);
        let wkt = tape.transpose(wk);
        let wvt = tape.transpose(wv);
        let q = tape.matmul(q_in, wqt)?; // n × a
        let k = tape.matmul(k_in, wkt)?;
        let v = tape.matmul(v_in, wvt)?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?; // n × n
        let scaled = tape.scale(logits, inv_sqrt);
        let (alpha, _) = tape.softmax_rows(scaled, mask)?;
        ctxs.push(tape.matmul(alpha, v)?); // n × a
    }
    let cat = tape.concat_features(&ctxs)?; // n × h·a
    let wo = tape.param(ps, p.wo);
    let wot = tape.transpose(wo);
    tape.matmul(cat, wot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn att_pool_uniform_scores_average_rows() {
        // W = 0 makes every score vᵀ·tanh(b): identical, so α is uniform
        // over valid rows and pooling is a plain average.
        let mut ps = ParamSet::new();
        let p = AttPoolP {
            w: ps.add_zeros("w", 3, 2).unwrap(),
            b: ps.add("b", Tensor::row(vec![0.3, -0.2, 0.9])).unwrap(),
            v: ps.add("v", Tensor::row(vec![1.0, 1.0, 1.0])).unwrap(),
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 2, vec![2.0, 4.0, 6.0, 8.0]).unwrap());
        let (u, all_masked) = att_pool(&mut tape, &ps, x, &p, None).unwrap();
        assert!(!all_masked);
        let got = tape.value(u);
        assert!((got.get(0, 0) - 4.0).abs() < 1e-12);
        assert!((got.get(0, 1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn att_pool_single_valid_row_returns_it_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let p = AttPoolP {
            w: ps.add_xavier("w", 4, 3, &mut rng).unwrap(),
            b: ps.add_zeros("b", 1, 4).unwrap(),
            v: ps.add_xavier("v", 1, 4, &mut rng).unwrap(),
        };
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(3, 3, vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]).unwrap(),
        );
        let (u, flag) = att_pool(&mut tape, &ps, x, &p, Some(&[true, false, false])).unwrap();
        assert!(!flag);
        assert_eq!(tape.value(u).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn att_pool_all_masked_flags_and_zeroes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let p = AttPoolP {
            w: ps.add_xavier("w", 2, 2, &mut rng).unwrap(),
            b: ps.add_zeros("b", 1, 2).unwrap(),
            v: ps.add_xavier("v", 1, 2, &mut rng).unwrap(),
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (u, flag) = att_pool(&mut tape, &ps, x, &p, Some(&[false, false])).unwrap();
        assert!(flag);
        assert_eq!(tape.value(u).as_slice(), &[0.0, 0.0]);
    }

    /// Pooling output stays inside the per-coordinate envelope of the valid
    /// rows — α is a convex combination.
    #[test]
    fn att_pool_output_in_convex_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let n = 1 + (trial % 6);
            let d = 2 + (trial % 4);
            let mut ps = ParamSet::new();
            let p = AttPoolP {
                w: ps.add_xavier("w", 3, d, &mut rng).unwrap(),
                b: ps.add_xavier("b", 1, 3, &mut rng).unwrap(),
                v: ps.add_xavier("v", 1, 3, &mut rng).unwrap(),
            };
            let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xt = Tensor::from_vec(n, d, data).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let (u, _) = att_pool(&mut tape, &ps, x, &p, None).unwrap();
            for c in 0..d {
                let col: Vec<f64> = (0..n).map(|r| xt.get(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let got = tape.value(u).get(0, c);
                assert!(
                    got >= lo - 1e-12 && got <= hi + 1e-12,
                    "pooled {got} outside [{lo}, {hi}]"
                );
            }
        }
    }

    #[test]
    fn mha_output_shape_and_mask() {
        let (n, dq, dv, heads, a) = (5usize, 7usize, 4usize, 2usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let p = MhaP {
            wq: (0..heads)
                .map(|h| ps.add_xavier(&format!("wq{h}"), a, dq, &mut rng).unwrap())
                .collect(),
            wk: (0..heads)
                .map(|h| ps.add_xavier(&format!("wk{h}"), a, dq, &mut rng).unwrap())
                .collect(),
            wv: (0..heads)
                .map(|h| ps.add_xavier(&format!("wv{h}"), a, dv, &mut rng).unwrap())
                .collect(),
            wo: ps
                .add_xavier("wo", heads * a, heads * a, &mut rng)
                .unwrap(),
        };
        let qk: Vec<f64> = (0..n * dq).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vals: Vec<f64> = (0..n * dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let qkn = tape.leaf(Tensor::from_vec(n, dq, qk).unwrap());
        let vn = tape.leaf(Tensor::from_vec(n, dv, vals).unwrap());
        let mask = vec![true, true, true, false, false];
        let out = multi_head_attention(&mut tape, &ps, qkn, qkn, vn, &p, Some(&mask)).unwrap();
        assert_eq!(tape.value(out).shape(), [n, heads * a]);
    }

    /// A masked-out key must not influence any valid row's output, no matter
    /// how extreme its content.
    #[test]
    fn mha_masked_keys_have_no_influence() {
        let (n, d, heads, a) = (4usize, 3usize, 2usize, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::new();
        let p = MhaP {
            wq: (0..heads)
                .map(|h| ps.add_xavier(&format!("wq{h}"), a, d, &mut rng).unwrap())
                .collect(),
            wk: (0..heads)
                .map(|h| ps.add_xavier(&format!("wk{h}"), a, d, &mut rng).unwrap())
                .collect(),
            wv: (0..heads)
                .map(|h| ps.add_xavier(&format!("wv{h}"), a, d, &mut rng).unwrap())
                .collect(),
            wo: ps
                .add_xavier("wo", heads * a, heads * a, &mut rng)
                .unwrap(),
        };
        let mask = vec![true, true, true, false];
        let base: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut poisoned = base.clone();
        for c in 0..d {
            poisoned[3 * d + c] = 1e6; // rewrite the masked row
        }
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(n, d, data).unwrap());
            let out =
                multi_head_attention(&mut tape, &ps, x, x, x, &p, Some(&mask)).unwrap();
            tape.value(out).clone()
        };
        let a_out = run(base);
        let b_out = run(poisoned);
        for r in 0..3 {
            // valid rows only; row 3's own output is garbage either way
            for c in 0..heads * a {
                assert_eq!(a_out.get(r, c), b_out.get(r, c));
            }
        }
    }
}
