//! Dense row-major 2-D tensors. Scalars are 1×1, row vectors 1×n.
//!
//! Everything downstream (attention over a history window, pooling, the
//! loss) lives comfortably in two dimensions, so the shape is a fixed
//! `[rows, cols]` pair rather than a general rank list.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not fill shape [{rows}, {cols}]",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// 1×n row vector.
    pub fn row(data: Vec<f64>) -> Tensor {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    /// 1×1 scalar.
    pub fn scalar(x: f64) -> Tensor {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = x;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "item() on a [{}, {}] tensor",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    /// Copy of the first `n` rows.
    pub fn top_rows(&self, n: usize) -> Tensor {
        debug_assert!(n <= self.rows);
        Tensor {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }

    pub fn any_nan(&self) -> bool {
        self.data.iter().any(|x| !x.is_finite())
    }

    pub fn fill(&mut self, x: f64) {
        self.data.iter_mut().for_each(|v| *v = x);
    }

    /// self += other, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{op}: [{}, {}] vs [{}, {}]",
        a.rows, a.cols, b.rows, b.cols
    ))
}

/// (n×k)(k×m) → n×m.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            out.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a, b));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// X (n×m) plus a 1×m row broadcast over every row.
pub fn add_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.rows != 1 || b.cols != x.cols {
        return Err(shape_err("add_row", x, b));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        for (o, &bv) in row.iter_mut().zip(&b.data) {
            *o += bv;
        }
    }
    Ok(out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let mut out = a.clone();
    out.data.iter_mut().for_each(|v| *v *= c);
    out
}

pub fn tanh_map(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.data.iter_mut().for_each(|v| *v = v.tanh());
    out
}

pub fn mul_elem(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul_elem", a, b));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data.iter_mut().zip(&b.data) {
        *o *= bv;
    }
    Ok(out)
}

/// Column-wise concatenation of equal-height blocks.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows != b.rows {
        return Err(shape_err("concat_cols", a, b));
    }
    let cols = a.cols + b.cols;
    let mut out = Tensor::zeros(a.rows, cols);
    for r in 0..a.rows {
        out.data[r * cols..r * cols + a.cols]
            .copy_from_slice(&a.data[r * a.cols..(r + 1) * a.cols]);
        out.data[r * cols + a.cols..(r + 1) * cols]
            .copy_from_slice(&b.data[r * b.cols..(r + 1) * b.cols]);
    }
    Ok(out)
}

/// Row-wise softmax with an optional column validity mask.
///
/// Masked positions come out exactly 0 and valid positions renormalize over
/// the surviving mass. A row with no valid position at all becomes a zero
/// row and is flagged (second return value, one flag per row) so callers can
/// branch instead of dividing by zero.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<(Tensor, Vec<bool>)> {
    if let Some(m) = mask {
        if m.len() != x.cols {
            return Err(Error::Shape(format!(
                "softmax mask length {} vs {} columns",
                m.len(),
                x.cols
            )));
        }
    }
    let valid = |c: usize| mask.map_or(true, |m| m[c]);
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut flags = vec![false; x.rows];
    for r in 0..x.rows {
        let mut max = f64::NEG_INFINITY;
        for c in 0..x.cols {
            if valid(c) {
                max = max.max(x.get(r, c));
            }
        }
        if max == f64::NEG_INFINITY {
            flags[r] = true; // nothing valid in this row
            continue;
        }
        let mut sum = 0.0;
        for c in 0..x.cols {
            if valid(c) {
                let e = (x.get(r, c) - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..x.cols {
            if valid(c) {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
    }
    Ok((out, flags))
}
