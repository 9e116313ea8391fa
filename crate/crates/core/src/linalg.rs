//! Small dense-matrix helpers.
//!
//! Row-major `f64` matrices sized for desk-scale work (dims in the tens to
//! low hundreds). Nothing here is tuned; clarity wins.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                context: "matrix data length",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(Error::DimMismatch {
                    context: "ragged matrix row",
                    expected: n_cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols: n_cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// y = M x (panics on shape mismatch; internal use).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec shape");
        (0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect()
    }

    /// y = Mᵀ x.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "matvec_t shape");
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (c, yc) in y.iter_mut().enumerate() {
                *yc += self.get(r, c) * xr;
            }
        }
        y
    }

    /// Reorders rows into a canonical order (lexicographic by total order on
    /// f64). Two matrices holding the same row set in any order become
    /// bit-identical.
    pub fn with_sorted_rows(&self) -> Matrix {
        let mut idx: Vec<usize> = (0..self.rows).collect();
        idx.sort_by(|&a, &b| {
            let ra = self.row(a);
            let rb = self.row(b);
            for (x, y) in ra.iter().zip(rb) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    o => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        let mut data = Vec::with_capacity(self.data.len());
        for &i in &idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Dot product with four accumulators; the hot path of every matvec here.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() & !3;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    while i < a.len() {
        tail += a[i] * b[i];
        i += 1;
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// y += a·x, unrolled to match [`dot`].
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    let n = y.len() & !3;
    let mut i = 0;
    while i < n {
        y[i] += a * x[i];
        y[i + 1] += a * x[i + 1];
        y[i + 2] += a * x[i + 2];
        y[i + 3] += a * x[i + 3];
        i += 4;
    }
    while i < y.len() {
        y[i] += a * x[i];
        i += 1;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between two displacement vectors.
///
/// Returns `None` when either vector has near-zero norm; callers decide how
/// to flag that case.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
///
/// Two orthogonalization passes keep the columns orthonormal to near machine
/// precision at the dims used here (≤ a few dozen).
pub fn random_orthogonal(dim: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|_| rng.normal_vec(dim)).collect();
    for i in 0..dim {
        for _pass in 0..2 {
            for j in 0..i {
                let proj = dot(&cols[i], &cols[j]);
                let prev = cols[j].clone();
                for (x, p) in cols[i].iter_mut().zip(&prev) {
                    *x -= proj * p;
                }
            }
        }
        let n = norm(&cols[i]);
        assert!(n > 1e-12, "degenerate Gram-Schmidt draw");
        for x in cols[i].iter_mut() {
            *x /= n;
        }
    }
    // cols[i] becomes row i, i.e. the matrix maps e_i to an orthonormal row set.
    let mut m = Matrix::zeros(dim, dim);
    for (i, col) in cols.iter().enumerate() {
        m.row_mut(i).copy_from_slice(col);
    }
    m
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching unit eigenvectors
/// as rows of the returned matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(Error::DimMismatch {
            context: "symmetric_eigen expects square matrix",
            expected: a.rows(),
            actual: a.cols(),
        });
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vpk = v.get(p, k);
                    let vqk = v.get(q, k);
                    v.set(p, k, c * vpk - s * vqk);
                    v.set(q, k, s * vpk + c * vqk);
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| (m.get(i, i), v.row(i).to_vec()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let eigs = pairs.iter().map(|p| p.0).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (i, (_, vec)) in pairs.into_iter().enumerate() {
        vecs.row_mut(i).copy_from_slice(&vec);
    }
    Ok((eigs, vecs))
}
