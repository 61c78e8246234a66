//! Define-by-run reverse-mode tape over the fixed op set the encoders need.
//!
//! A [`Tape`] is rebuilt per forward pass: leaves hold inputs, `param` nodes
//! copy trainable tensors in (tagged with their [`ParamSet`] index), and
//! every op pushes a node whose index is already in topological order.
//! [`Tape::backward`] walks the nodes once in reverse, pushing gradients to
//! parents and accumulating into `ParamSet` gradients. No general graph
//! machinery — exactly the ops below, each with its adjoint spelled out.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nncore::tensor::{self, Tensor};

/// One named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters. Order is insertion order and is
/// load-bearing: Adam state and checkpoints both key off it.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    items: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Register a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.items.push(Param {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(self.items.len() - 1)
    }

    /// Xavier-uniform init: limit √(6/(fan_in+fan_out)).
    pub fn add_xavier(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.items[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.items.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.items.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad.fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// X (n×m) + row b (1×m) broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Scalar node s (1×1) times tensor x.
    ScaleByScalar { s: NodeId, x: NodeId },
    Tanh(NodeId),
    SoftmaxRows {
        x: NodeId,
        mask: Option<Vec<bool>>,
        flagged: Vec<bool>,
    },
    Dropout {
        x: NodeId,
        keep: Vec<bool>,
        inv_keep: f64,
    },
    /// Gather rows `ids` from an embedding table node.
    EmbedRows { table: NodeId, ids: Vec<usize> },
    ConcatCols(NodeId, NodeId),
    /// −log softmax(scores)[target] for a 1×n score row.
    NegLogSoftmax { scores: NodeId, target: usize },
    /// Extract element i of a 1×n row as a scalar.
    Index { x: NodeId, i: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant/input leaf; receives no gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Copy a parameter in. Multiple nodes for the same index are fine —
    /// their gradients accumulate into the one `ParamSet` slot.
    pub fn param(&mut self, ps: &ParamSet, idx: usize) -> NodeId {
        self.push(ps.get(idx).value.clone(), Op::Param(idx))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = tensor::transpose(self.value(a));
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add_row(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = tensor::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn scale_by_scalar(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != [1, 1] {
            return Err(Error::Shape(format!(
                "scale_by_scalar: scalar operand has shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let v = tensor::scale(self.value(x), sv);
        Ok(self.push(v, Op::ScaleByScalar { s, x }))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = tensor::tanh_map(self.value(a));
        self.push(v, Op::Tanh(a))
    }

    /// Masked row softmax; per-row all-masked flags are returned and also
    /// stored on the node so backward can skip those rows.
    pub fn softmax_rows(
        &mut self,
        x: NodeId,
        mask: Option<&[bool]>,
    ) -> Result<(NodeId, Vec<bool>)> {
        let (v, flags) = tensor::softmax_rows(self.value(x), mask)?;
        let id = self.push(
            v,
            Op::SoftmaxRows {
                x,
                mask: mask.map(|m| m.to_vec()),
                flagged: flags.clone(),
            },
        );
        Ok((id, flags))
    }

    /// Inverted dropout. Identity (no node pushed) when not training or
    /// p = 0; the keep mask is drawn from `rng`, so determinism is the
    /// caller's seed discipline.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= p).collect();
        let inv_keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mut v = xv.clone();
        for (val, &k) in v.as_mut_slice().iter_mut().zip(&keep) {
            *val = if k { *val * inv_keep } else { 0.0 };
        }
        Ok(self.push(v, Op::Dropout { x, keep, inv_keep }))
    }

    /// Gather table rows by index (embedding lookup).
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let cols = t.cols();
        let mut v = Tensor::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::InvalidInput(format!(
                    "embedding id {id} out of range for a {}-row table",
                    t.rows()
                )));
            }
            v.as_mut_slice()[r * cols..(r + 1) * cols].copy_from_slice(t.row_slice(id));
        }
        Ok(self.push(
            v,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    /// Fold a list of equal-height blocks into one wide tensor.
    pub fn concat_features(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut it = parts.iter();
        let first = *it.next().ok_or_else(|| {
            Error::InvalidInput("concat_features needs at least one part".into())
        })?;
        let mut acc = first;
        for &p in it {
            acc = self.concat_cols(acc, p)?;
        }
        Ok(acc)
    }

    /// Cross-entropy of the softmax over a 1×n score row against `target`,
    /// computed with max-subtraction so huge scores cannot overflow.
    pub fn neg_log_softmax(&mut self, scores: NodeId, target: usize) -> Result<NodeId> {
        let s = self.value(scores);
        if s.rows() != 1 || target >= s.cols() {
            return Err(Error::Shape(format!(
                "neg_log_softmax: scores [{}, {}], target {target}",
                s.rows(),
                s.cols()
            )));
        }
        let row = s.row_slice(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        let loss = logsum - row[target];
        Ok(self.push(Tensor::scalar(loss), Op::NegLogSoftmax { scores, target }))
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rows() != 1 || i >= xv.cols() {
            return Err(Error::Shape(format!(
                "index: operand [{}, {}], index {i}",
                xv.rows(),
                xv.cols()
            )));
        }
        let v = Tensor::scalar(xv.get(0, i));
        Ok(self.push(v, Op::Index { x, i }))
    }

    /// Reverse pass from a scalar node, seeding its gradient with `seed`
    /// (1.0 for a plain loss; 1/batch when averaging per-sample losses by
    /// accumulation). Parameter gradients are *added* into `params`.
    pub fn backward(&mut self, loss: NodeId, seed: f64, params: &mut ParamSet) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Shape(format!(
                "backward from a non-scalar node of shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(seed));

        // Helper: accumulate `g` into grads[target].
        fn acc(grads: &mut [Option<Tensor>], target: NodeId, g: Tensor) {
            match &mut grads[target.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(idx) => {
                    params.get_mut(*idx).grad.add_assign(&g);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = tensor::matmul(&g, &tensor::transpose(self.value(b)))?;
                    let db = tensor::matmul(&tensor::transpose(self.value(a)), &g)?;
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    acc(&mut grads, a, tensor::transpose(&g));
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::AddRow(x, b) => {
                    let (x, b) = (*x, *b);
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            db.set(0, c, db.get(0, c) + g.get(r, c));
                        }
                    }
                    acc(&mut grads, x, g);
                    acc(&mut grads, b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    acc(&mut grads, a, tensor::scale(&g, c));
                }
                Op::ScaleByScalar { s, x } => {
                    let (s, x) = (*s, *x);
                    let sv = self.value(s).item();
                    let ds: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(x).as_slice())
                        .map(|(&gv, &xv)| gv * xv)
                        .sum();
                    acc(&mut grads, s, Tensor::scalar(ds));
                    acc(&mut grads, x, tensor::scale(&g, sv));
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let mut dx = g;
                    for (gv, &yv) in dx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    acc(&mut grads, a, dx);
                }
                Op::SoftmaxRows { x, mask, flagged } => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let valid = |c: usize| mask.as_ref().map_or(true, |m| m[c]);
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if flagged[r] {
                            continue; // zero row, zero gradient
                        }
                        let mut dot = 0.0;
                        for c in 0..y.cols() {
                            if valid(c) {
                                dot += g.get(r, c) * y.get(r, c);
                            }
                        }
                        for c in 0..y.cols() {
                            if valid(c) {
                                dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Op::Dropout { x, keep, inv_keep } => {
                    let (x, inv_keep) = (*x, *inv_keep);
                    let mut dx = g;
                    for (gv, &k) in dx.as_mut_slice().iter_mut().zip(keep) {
                        *gv = if k { *gv * inv_keep } else { 0.0 };
                    }
                    acc(&mut grads, x, dx);
                }
                Op::EmbedRows { table, ids } => {
                    let table = *table;
                    let t = self.value(table);
                    let mut dt = Tensor::zeros(t.rows(), t.cols());
                    let cols = t.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            dt.set(id, c, dt.get(id, c) + g.get(r, c));
                        }
                    }
                    acc(&mut grads, table, dt);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ac = self.value(a).cols();
                    let bc = self.value(b).cols();
                    let mut da = Tensor::zeros(g.rows(), ac);
                    let mut db = Tensor::zeros(g.rows(), bc);
                    for r in 0..g.rows() {
                        for c in 0..ac {
                            da.set(r, c, g.get(r, c));
                        }
                        for c in 0..bc {
                            db.set(r, c, g.get(r, ac + c));
                        }
                    }
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::NegLogSoftmax { scores, target } => {
                    let (scores, target) = (*scores, *target);
                    let s = self.value(scores);
                    let row = s.row_slice(0);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let gl = g.item();
                    let mut ds = Tensor::zeros(1, row.len());
                    for (c, &e) in exps.iter().enumerate() {
                        let soft = e / sum;
                        let delta = if c == target { 1.0 } else { 0.0 };
                        ds.set(0, c, gl * (soft - delta));
                    }
                    acc(&mut grads, scores, ds);
                }
                Op::Index { x, i: col } => {
                    let (x, col) = (*x, *col);
                    let mut dx = Tensor::zeros(1, self.value(x).cols());
                    dx.set(0, col, g.item());
                    acc(&mut grads, x, dx);
                }
            }
        }
        Ok(())
    }
}
