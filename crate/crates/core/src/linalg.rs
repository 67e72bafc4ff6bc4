//! Dense symmetric matrices and Gaussian sampling through a pivoted Cholesky
//! factorization.
//!
//! The factorization stops once every remaining Schur-complement pivot is
//! below `tolerance * max_diag`; the dropped residual is the clipped part of
//! the spectrum. For an exactly PSD input of rank `r` the sampled covariance
//! equals the input, and a rank-deficient Gram matrix costs `O(n r^2)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{standard_normal, Real};

/// Square matrix in row-major storage. Symmetry is checked, not enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Real> SymMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![T::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, T::one());
        }
        m
    }

    /// Builds the full matrix from the lower triangle; `f(i, j)` is called with `j <= i`.
    pub fn from_lower_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m.data[i * n + j] = v;
                m.data[j * n + i] = v;
            }
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::NotSquare { rows: n, cols: row.len() });
            }
            data.extend(row);
        }
        Ok(Self { n, data })
    }

    pub fn from_flat(n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::NotSquare { rows: n, cols: data.len() / n.max(1) });
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Rejects NaN/inf entries and asymmetry beyond `tol * max(1, max|a_ij|)`.
    pub fn validate(&self, tol: T) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        let scale = self.data.iter().fold(T::one(), |m, v| m.max(v.abs()));
        for i in 0..self.n {
            for j in 0..i {
                let diff = (self.get(i, j) - self.get(j, i)).abs();
                if diff > tol * scale {
                    return Err(Error::Asymmetric { i, j, diff: diff.as_f64() });
                }
            }
        }
        Ok(())
    }

    /// `x^T A x`.
    pub fn quadratic_form(&self, x: &[T]) -> T {
        let mut acc = T::zero();
        for i in 0..self.n {
            let row = self.row(i);
            let mut s = T::zero();
            for j in 0..self.n {
                s += row[j] * x[j];
            }
            acc += x[i] * s;
        }
        acc
    }
}

/// Low-rank factor `L` (n x rank) with `L L^T` equal to the clipped input.
#[derive(Debug, Clone)]
pub struct GaussianFactor<T> {
    n: usize,
    rank: usize,
    /// Row `i` holds `L[i, 0..rank]`.
    rows: Vec<T>,
    clipped_trace: T,
}

impl<T: Real> GaussianFactor<T> {
    /// Pivoted Cholesky with the default relative pivot tolerance.
    pub fn new(a: &SymMatrix<T>) -> Result<Self> {
        Self::with_tolerance(a, T::pivot_tolerance())
    }

    pub fn with_tolerance(a: &SymMatrix<T>, rel_tol: T) -> Result<Self> {
        let n = a.dim();
        let mut diag: Vec<T> = (0..n).map(|i| a.get(i, i)).collect();
        if diag.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("covariance diagonal"));
        }
        let scale = diag.iter().fold(T::zero(), |m, d| m.max(d.abs()));
        let mut used = vec![false; n];
        // Row `i` of `work` holds `L[i, 0..rank]` with stride `n` while pivots are appended.
        let mut work = vec![T::zero(); n * n];
        let mut rank = 0;
        if scale > T::zero() {
            let tol = rel_tol * scale;
            for _ in 0..n {
                let mut pivot = usize::MAX;
                let mut best = tol;
                for i in 0..n {
                    if !used[i] && diag[i] > best {
                        best = diag[i];
                        pivot = i;
                    }
                }
                if pivot == usize::MAX {
                    break;
                }
                let root = best.sqrt();
                work[pivot * n + rank] = root;
                used[pivot] = true;
                let (prow_start, k) = (pivot * n, rank);
                for i in 0..n {
                    if used[i] {
                        continue;
                    }
                    let mut s = a.get(i, pivot);
                    for c in 0..k {
                        s -= work[i * n + c] * work[prow_start + c];
                    }
                    let l = s / root;
                    work[i * n + k] = l;
                    diag[i] -= l * l;
                }
                rank += 1;
            }
        }
        let mut clipped = T::zero();
        let neg_tol = T::epsilon().sqrt() * scale.max(T::min_positive_value());
        for i in 0..n {
            if !used[i] {
                if diag[i] < -neg_tol {
                    return Err(Error::Factorization {
                        pivot: diag[i].as_f64(),
                        tolerance: neg_tol.as_f64(),
                    });
                }
                clipped += diag[i].max(T::zero());
            }
        }
        let mut rows = vec![T::zero(); n * rank];
        for i in 0..n {
            rows[i * rank..(i + 1) * rank].copy_from_slice(&work[i * n..i * n + rank]);
        }
        Ok(Self { n, rank, rows, clipped_trace: clipped })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Trace of the discarded residual.
    pub fn clipped_trace(&self) -> T {
        self.clipped_trace
    }

    /// `out = L z` for a fresh standard normal `z`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [T]) {
        assert_eq!(out.len(), self.n, "output length");
        let z: Vec<T> = (0..self.rank).map(|_| standard_normal(rng)).collect();
        self.apply(&z, out);
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        self.sample_into(rng, &mut out);
        out
    }

    /// `out = L z` for a caller-supplied `z` of length `rank`.
    pub fn apply(&self, z: &[T], out: &mut [T]) {
        for i in 0..self.n {
            let row = &self.rows[i * self.rank..(i + 1) * self.rank];
            let mut s = T::zero();
            for (l, zk) in row.iter().zip(z) {
                s += *l * *zk;
            }
            out[i] = s;
        }
    }

    /// `L L^T`.
    pub fn covariance(&self) -> SymMatrix<T> {
        let r = self.rank;
        SymMatrix::from_lower_fn(self.n, |i, j| {
            let a = &self.rows[i * r..(i + 1) * r];
            let b = &self.rows[j * r..(j + 1) * r];
            a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
        })
    }
}

/// Mean-zero Gaussian vector with covariance `gram` (negative spectrum clipped).
pub fn sample_correlated_gaussian<T: Real, R: Rng + ?Sized>(gram: &SymMatrix<T>, rng: &mut R) -> Result<Vec<T>> {
    gram.validate(T::lit(1e-10))?;
    Ok(GaussianFactor::new(gram)?.sample(rng))
}
