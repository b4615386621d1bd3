//! Dense row-major `f64` tensors and the recording tape used for
//! reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value. Computations that need gradients run on a
//! [`Tape`], whose [`Var`] handles pair a tensor with its node in the
//! recorded graph. Tapes are cheap and meant to be rebuilt for every
//! forward pass.

mod tape;

pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes aligned on their trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How the flat indices of an operand relate to the flat indices of the
/// broadcast shape it is expanded to.
enum BroadcastMap {
    Same,
    /// Operand equals a trailing block of the output; index is `i % len`.
    Suffix(usize),
    General(Vec<usize>),
}

impl BroadcastMap {
    fn new(out: &[usize], input: &[usize]) -> Self {
        if out == input {
            return BroadcastMap::Same;
        }
        let trimmed: Vec<usize> = input
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Suffix(numel(&trimmed));
        }
        let rank = out.len();
        let offset = rank - input.len();
        let in_strides = strides(input);
        let mut eff = vec![0; rank];
        for d in 0..input.len() {
            if input[d] != 1 {
                eff[d + offset] = in_strides[d];
            }
        }
        let n = numel(out);
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..n {
            map.push(pos);
            for d in (0..rank).rev() {
                idx[d] += 1;
                pos += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                pos -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        BroadcastMap::General(map)
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Same => i,
            BroadcastMap::Suffix(len) => i % len,
            BroadcastMap::General(map) => map[i],
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a `rows.len() × cols` matrix; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Leading dimension (batch size).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading-dimension entry.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            numel(&self.shape[1..])
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Gathers rows along the leading dimension.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    /// L2 norm of each leading-dimension entry.
    pub fn row_norms(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op with trailing-dimension broadcasting.
    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }
        })?;
        let ma = BroadcastMap::new(&shape, &self.shape);
        let mb = BroadcastMap::new(&shape, &other.shape);
        let n = numel(&shape);
        let data = (0..n)
            .map(|i| f(self.data[ma.index(i)], other.data[mb.index(i)]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Sums a gradient of the broadcast shape back down to `shape`.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let mut out = Tensor::zeros(shape.to_vec());
        match BroadcastMap::new(&self.shape, shape) {
            BroadcastMap::Same => unreachable!(),
            BroadcastMap::Suffix(len) => {
                for chunk in self.data.chunks(len) {
                    for (o, v) in out.data.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            BroadcastMap::General(map) => {
                for (i, &j) in map.iter().enumerate() {
                    out.data[j] += self.data[i];
                }
            }
        }
        out
    }

    /// Matrix product of two rank-2 tensors, optionally transposing either
    /// operand without materializing the transpose.
    pub(crate) fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k) = if ta {
            (self.shape[1], self.shape[0])
        } else {
            (self.shape[0], self.shape[1])
        };
        let (k2, n) = if tb {
            (other.shape[1], other.shape[0])
        } else {
            (other.shape[0], other.shape[1])
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let a = &self.data;
        let b = &other.data;
        let mut c = vec![0.0; m * n];
        let a_at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
        if !tb {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a_at(i, p);
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        } else {
            for i in 0..m {
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (p, bv) in brow.iter().enumerate() {
                        acc += a_at(i, p) * bv;
                    }
                    c[i * n + j] = acc;
                }
            }
        }
        Tensor::new(vec![m, n], c)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs a matrix, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], data)
    }

    fn check_axes(&self, axes: &[usize], op: &'static str) -> Result<()> {
        for &a in axes {
            if a >= self.rank() {
                return Err(Error::InvalidAxis {
                    op,
                    axis: a,
                    rank: self.rank(),
                });
            }
        }
        Ok(())
    }

    /// For each input flat index, the flat index of the reduced output.
    fn reduction_map(&self, axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &s)| s)
            .collect();
        let out_strides = strides(&out_shape);
        let mut eff = vec![0; self.rank()];
        let mut o = 0;
        for d in 0..self.rank() {
            if !axes.contains(&d) {
                eff[d] = out_strides[o];
                o += 1;
            }
        }
        let mut map = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; self.rank()];
        let mut pos = 0usize;
        for _ in 0..self.len() {
            map.push(pos);
            for d in (0..self.rank()).rev() {
                idx[d] += 1;
                pos += eff[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                pos -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        (map, out_shape)
    }

    /// Sums over `axes`, removing them. An empty slice reduces every axis.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        self.check_axes(axes, "sum")?;
        if axes.is_empty() || axes.len() == self.rank() {
            return Ok(Tensor::scalar(self.data.iter().sum()));
        }
        let (map, out_shape) = self.reduction_map(axes);
        let mut out = Tensor::zeros(out_shape);
        for (i, &j) in map.iter().enumerate() {
            out.data[j] += self.data[i];
        }
        Ok(out)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let s = self.sum_axes(axes)?;
        let n = (self.len() / s.len().max(1)) as f64;
        Ok(s.scale(1.0 / n))
    }

    /// Broadcasts a reduced tensor back over the reduced `axes` of `shape`.
    pub(crate) fn expand_reduced(&self, shape: &[usize], axes: &[usize]) -> Tensor {
        let probe = Tensor::zeros(shape.to_vec());
        if axes.is_empty() || axes.len() == shape.len() {
            return Tensor::full(shape.to_vec(), self.data[0]);
        }
        let (map, _) = probe.reduction_map(axes);
        Tensor {
            shape: shape.to_vec(),
            data: map.iter().map(|&j| self.data[j]).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(Error::ElementCount {
                expected: numel(&shape),
                shape,
                actual: self.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// `(outer, axis extent, inner)` block sizes for axis-wise copies.
    fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        (
            numel(&shape[..axis]),
            shape[axis],
            numel(&shape[axis + 1..]),
        )
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axes(&[axis], "slice")?;
        if start + len > self.shape[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) exceeds extent {} of axis {axis}",
                start + len,
                self.shape[axis]
            )));
        }
        let (outer, extent, inner) = Self::blocks(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        first.check_axes(&[axis], "concat")?;
        for p in parts {
            let same = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let (outer, _, inner) = Self::blocks(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = p.shape[axis];
                data.extend_from_slice(&p.data[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    /// Gathers columns of a matrix: `out[:, j] = self[:, idx[j]]`.
    pub fn select_columns(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "select_columns needs a matrix, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid(format!(
                "column {bad} out of range for {cols} columns"
            )));
        }
        let rows = self.shape[0];
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            data.extend(idx.iter().map(|&i| row[i]));
        }
        Tensor::new(vec![rows, idx.len()], data)
    }

    /// Row-wise log-softmax of a matrix, using the max-shift.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "log_softmax needs a matrix, got {:?}",
                self.shape
            )));
        }
        let k = self.shape[1];
        let mut data = Vec::with_capacity(self.len());
        for row in self.data.chunks(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        Tensor::new(self.shape.clone(), data)
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        Ok(self.log_softmax_rows()?.map(f64::exp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_same_shape() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 3], &[4]), None);
        let a = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = Tensor::vector(vec![2.0; 2]);
        assert!(matches!(a.add(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn general_broadcast_and_reduce() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        assert_eq!(c.reduce_to(&[2, 1]).data(), &[63.0, 66.0]);
        assert_eq!(c.reduce_to(&[1, 3]).data(), &[23.0, 43.0, 63.0]);
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&m).unwrap(), m);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn transposed_matmul_variants_agree() {
        let a = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![2, 4], (0..8).map(|v| f64::from(v) * 0.5).collect()).unwrap();
        let direct = a.transpose().unwrap().matmul(&b).unwrap();
        assert_eq!(a.matmul_t(&b, true, false).unwrap(), direct);
        let c = Tensor::new(vec![4, 3], (0..12).map(f64::from).collect()).unwrap();
        let direct = a.matmul(&c.transpose().unwrap()).unwrap();
        assert_eq!(a.matmul_t(&c, false, true).unwrap(), direct);
    }

    #[test]
    fn reductions() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.sum_axes(&[]).unwrap().item(), 10.0);
        assert_eq!(m.sum_axes(&[0]).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(m.sum_axes(&[1]).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(Tensor::vector(vec![2.0, 4.0]).mean_axes(&[]).unwrap().item(), 3.0);
        assert!(matches!(m.sum_axes(&[2]), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn reshape_round_trip_and_errors() {
        let v = Tensor::vector((0..6).map(f64::from).collect());
        let m = v.reshape(vec![2, 3]).unwrap();
        assert_eq!(m.reshape(vec![6]).unwrap(), v);
        assert!(matches!(v.reshape(vec![4]), Err(Error::ElementCount { .. })));
    }

    #[test]
    fn slice_and_concat_invert() {
        let m = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let l = m.slice(1, 0, 1).unwrap();
        let r = m.slice(1, 1, 3).unwrap();
        assert_eq!(l.data(), &[0.0, 4.0]);
        assert_eq!(Tensor::concat(&[&l, &r], 1).unwrap(), m);
        assert!(m.slice(1, 3, 2).is_err());
    }

    #[test]
    fn softmax_stability() {
        let t = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let p = t.softmax_rows().unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-15);
    }
}
