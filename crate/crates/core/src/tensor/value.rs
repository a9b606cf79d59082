use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// A `Tensor` on its own is an immutable value; it joins a computation only
/// when registered on a [`Tape`](super::Tape).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {len} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new([data.len()], data)
    }

    /// Builds a 2-D tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::InvalidShape {
                    shape: vec![rows.len(), row.len()],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new([rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Element `(i, j)` of a 2-D tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub(crate) fn zip_same(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose requires a 2-D tensor".into(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Materializes `self` at `shape` under right-aligned broadcasting.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let err = || Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: self.shape.clone(),
            rhs: shape.to_vec(),
        };
        if self.rank() > shape.len() {
            return Err(err());
        }
        let pad = shape.len() - self.rank();
        let src_shape: Vec<usize> = std::iter::repeat_n(1, pad)
            .chain(self.shape.iter().copied())
            .collect();
        for (&s, &t) in src_shape.iter().zip(shape) {
            if s != t && s != 1 {
                return Err(err());
            }
        }
        let src_strides = strides(&src_shape);
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut index = vec![0usize; shape.len()];
        for _ in 0..len {
            let offset: usize = index
                .iter()
                .zip(&src_shape)
                .zip(&src_strides)
                .map(|((&i, &s), &st)| if s == 1 { 0 } else { i * st })
                .sum();
            data.push(self.data[offset]);
            increment(&mut index, shape);
        }
        Self::new(shape.to_vec(), data)
    }

    /// Sums a broadcast gradient back down to `shape`.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let pad = self.rank() - shape.len();
        let target: Vec<usize> = std::iter::repeat_n(1, pad)
            .chain(shape.iter().copied())
            .collect();
        let target_strides = strides(&target);
        let mut data = vec![0.0; target.iter().product()];
        let mut index = vec![0usize; self.rank()];
        for &g in &self.data {
            let offset: usize = index
                .iter()
                .zip(&target)
                .zip(&target_strides)
                .map(|((&i, &s), &st)| if s == 1 { 0 } else { i * st })
                .sum();
            data[offset] += g;
            increment(&mut index, &self.shape);
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub(crate) fn sum_axis(&self, axis: usize, keepdim: bool) -> Self {
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.data[base + i];
                }
            }
        }
        Self {
            shape: reduced_shape(&self.shape, axis, keepdim),
            data,
        }
    }

    pub(crate) fn logsumexp_axis(&self, axis: usize, keepdim: bool) -> Self {
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| self.data[(o * len + l) * inner + i];
                let max = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let value = if max == f64::NEG_INFINITY || max.is_nan() {
                    max
                } else {
                    max + (0..len).map(|l| (at(l) - max).exp()).sum::<f64>().ln()
                };
                data[o * inner + i] = value;
            }
        }
        Self {
            shape: reduced_shape(&self.shape, axis, keepdim),
            data,
        }
    }

    /// Repeats a reduced tensor back along `axis` to `full` shape.
    pub(crate) fn expand_axis(&self, full: &[usize], axis: usize) -> Self {
        let (outer, len, inner) = split_axis(full, axis);
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                data[base..base + inner].copy_from_slice(&self.data[o * inner..(o + 1) * inner]);
            }
        }
        Self {
            shape: full.to_vec(),
            data,
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn increment(index: &mut [usize], shape: &[usize]) {
    for axis in (0..shape.len()).rev() {
        index[axis] += 1;
        if index[axis] < shape[axis] {
            return;
        }
        index[axis] = 0;
    }
}

/// (product of leading extents, extent of `axis`, product of trailing extents)
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

/// Right-aligned broadcast of two shapes; `None` when incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let get = |s: &[usize], i: usize| {
        let pad = rank - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    (0..rank)
        .map(|i| {
            let (x, y) = (get(a, i), get(b, i));
            match (x, y) {
                _ if x == y => Some(x),
                (1, _) => Some(y),
                (_, 1) => Some(x),
                _ => None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_length_mismatch() {
        assert!(Tensor::new([2, 0], vec![]).is_err());
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_in_shape() {
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let wide = b.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(wide.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let back = wide.reduce_to(&[3]);
        assert_eq!(back.data(), &[2.0, 4.0, 6.0]);
        let col = Tensor::new([2, 1], vec![1.0, 2.0]).unwrap();
        let wide = col.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(wide.data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(wide.reduce_to(&[2, 1]).data(), &[3.0, 6.0]);
    }

    #[test]
    fn broadcast_rejects_non_unit_expansion() {
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(t.broadcast_to(&[2, 3]).is_err());
        assert_eq!(broadcast_shapes(&[4, 1], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shapes(&[4, 2], &[3]), None);
    }

    #[test]
    fn axis_reductions() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(t.sum_axis(0, false).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.sum_axis(1, true).shape(), &[2, 1]);
        assert_eq!(t.sum_axis(1, true).data(), &[6.0, 15.0]);
    }
}
