//! Compact SVD of a wide decoder matrix and the projection onto the
//! orthogonal complement of its kernel.
//!
//! For a `k × d` matrix with `k ≤ d` (classes by representation width) the
//! factorization goes through the `k × k` Gram matrix `W·Wᵀ`, which is
//! diagonalized by cyclic Jacobi rotations. Cost is `O(k²·d)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default relative threshold below which singular values count as zero.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-7;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Row-major dense matrix. Unlike [`Tensor`], zero extents are allowed so
/// that rank-0 factors can be represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("{} entries supplied", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let data: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().to_vec()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [rows, cols] => Self::new(rows, cols, t.data().to_vec()),
            _ => Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "expected a 2-D tensor".into(),
            }),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new([self.rows, self.cols], self.data.clone())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matrix_matmul",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for p in 0..self.cols {
                let a = self.get(i, p);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(p, j);
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: vec![self.rows, self.cols],
                rhs: vec![x.len()],
            });
        }
        Ok((0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) * x[j]).sum())
            .collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::ShapeMismatch {
                op: "matrix_sub",
                lhs: vec![self.rows, self.cols],
                rhs: vec![other.rows, other.cols],
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns. Iteration stops once the largest off-diagonal magnitude is at
/// most `1e-12 · |trace|`.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::InvalidShape {
            shape: vec![a.rows, a.cols],
            reason: "eigen-decomposition needs a square matrix".into(),
        });
    }
    let mut m = a.clone();
    let mut vecs = Matrix::identity(n);
    let threshold = 1e-12 * m.trace().abs();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .fold(0.0f64, |acc, (i, j)| acc.max(m.get(i, j).abs()));
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (vecs.get(k, p), vecs.get(k, q));
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut sorted = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            sorted.set(k, dst, vecs.get(k, src));
        }
    }
    Ok((values, sorted))
}

/// `W ≈ U · diag(Σ) · Vᵀ` keeping only singular values above
/// `rank_tolerance · σ_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactSvd {
    /// `k × r`, orthonormal columns.
    pub u: Matrix,
    /// Length `r`, positive and descending.
    pub singular_values: Vec<f64>,
    /// `d × r`, orthonormal columns spanning the complement of `ker(W)`.
    pub v: Matrix,
    pub rank_tolerance: f64,
}

impl CompactSvd {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let (k, d, r) = (self.u.rows, self.v.rows, self.rank());
        let mut out = Matrix::zeros(k, d);
        for i in 0..k {
            for j in 0..d {
                let v = (0..r)
                    .map(|l| self.u.get(i, l) * self.singular_values[l] * self.v.get(j, l))
                    .sum();
                out.set(i, j, v);
            }
        }
        out
    }
}

pub fn compact_svd(w: &Matrix, rank_tolerance: f64) -> Result<CompactSvd> {
    if w.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix passed to compact_svd".into()));
    }
    if w.rows == 0 || w.cols == 0 {
        return Err(Error::InvalidShape {
            shape: vec![w.rows, w.cols],
            reason: "compact_svd needs a non-empty matrix".into(),
        });
    }
    let (k, d) = (w.rows, w.cols);
    let gram = w.matmul(&w.transpose())?;
    let (eigenvalues, eigenvectors) = symmetric_eigen(&gram)?;

    let sigma_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0).sqrt();
    let keep: Vec<usize> = eigenvalues
        .iter()
        .enumerate()
        .filter(|&(_, &l)| sigma_max > 0.0 && l.max(0.0).sqrt() > rank_tolerance * sigma_max)
        .map(|(i, _)| i)
        .collect();
    let r = keep.len();
    let singular_values: Vec<f64> = keep.iter().map(|&i| eigenvalues[i].sqrt()).collect();

    let mut u = Matrix::zeros(k, r);
    for (col, &src) in keep.iter().enumerate() {
        let mut column = eigenvectors.column(src);
        let pivot =
            column.iter().copied().fold(
                0.0f64,
                |best, x| if x.abs() > best.abs() { x } else { best },
            );
        if pivot < 0.0 {
            column.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, x) in column.into_iter().enumerate() {
            u.set(i, col, x);
        }
    }

    // V = Wᵀ U Σ⁻¹, then modified Gram–Schmidt on its columns
    let mut v = w.transpose().matmul(&u)?;
    for (col, &s) in singular_values.iter().enumerate() {
        for i in 0..d {
            v.set(i, col, v.get(i, col) / s);
        }
    }
    for col in 0..r {
        for prev in 0..col {
            let dot: f64 = (0..d).map(|i| v.get(i, col) * v.get(i, prev)).sum();
            for i in 0..d {
                v.set(i, col, v.get(i, col) - dot * v.get(i, prev));
            }
        }
        let norm = (0..d).map(|i| v.get(i, col).powi(2)).sum::<f64>().sqrt();
        for i in 0..d {
            v.set(i, col, v.get(i, col) / norm);
        }
    }

    Ok(CompactSvd {
        u,
        singular_values,
        v,
        rank_tolerance,
    })
}

/// Orthogonal projection `P = V·Vᵀ` onto the complement of `ker(W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    p: Matrix,
    rank: usize,
}

impl ProjectionMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.rows
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn identity(d: usize) -> Self {
        Self {
            p: Matrix::identity(d),
            rank: d,
        }
    }

    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.p.matvec(y)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        self.p.to_tensor()
    }
}

pub fn kernel_complement_projection(svd: &CompactSvd) -> ProjectionMatrix {
    let (d, r) = (svd.v.rows, svd.rank());
    let mut p = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let x: f64 = (0..r).map(|l| svd.v.get(i, l) * svd.v.get(j, l)).sum();
            p.set(i, j, x);
            p.set(j, i, x);
        }
    }
    ProjectionMatrix { p, rank: r }
}
