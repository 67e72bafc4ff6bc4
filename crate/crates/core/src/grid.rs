//! Rectangular node grids and scalar fields sampled on them.

use crate::error::{Error, Result};
use crate::scalar::{compensated_sum, Real};

/// Tensor grid with `shape[a]` nodes along axis `a` at `origin[a] + i * spacing[a]`.
/// Flat indices are row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    origin: Vec<T>,
    spacing: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Real> Grid<T> {
    pub fn new(origin: Vec<T>, spacing: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        if origin.len() != spacing.len() || origin.len() != shape.len() || origin.is_empty() {
            return Err(Error::DimensionMismatch("grid origin/spacing/shape lengths".into()));
        }
        if spacing.iter().any(|&h| !(h > T::zero()) || !h.is_finite()) {
            return Err(Error::InvalidArgument("grid spacing must be positive and finite".into()));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidArgument("grid needs at least one node per axis".into()));
        }
        Ok(Self { origin, spacing, shape })
    }

    /// `nodes` equally spaced nodes from `lo` to `hi` inclusive on each of `dim` axes.
    pub fn cube(dim: usize, lo: T, hi: T, nodes: usize) -> Result<Self> {
        if nodes < 2 || !(hi > lo) {
            return Err(Error::InvalidArgument("cube grid needs hi > lo and at least two nodes".into()));
        }
        let h = (hi - lo) / T::of_usize(nodes - 1);
        Self::new(vec![lo; dim], vec![h; dim], vec![nodes; dim])
    }

    /// One-dimensional grid on `[lo, hi]` with `nodes` nodes.
    pub fn line(lo: T, hi: T, nodes: usize) -> Result<Self> {
        Self::cube(1, lo, hi, nodes)
    }

    /// Product grid `self x other`.
    pub fn product(&self, other: &Grid<T>) -> Grid<T> {
        let mut origin = self.origin.clone();
        origin.extend_from_slice(&other.origin);
        let mut spacing = self.spacing.clone();
        spacing.extend_from_slice(&other.spacing);
        let mut shape = self.shape.clone();
        shape.extend_from_slice(&other.shape);
        Grid { origin, spacing, shape }
    }

    /// `self` repeated `n` times.
    pub fn power(&self, n: usize) -> Grid<T> {
        let mut g = self.clone();
        for _ in 1..n {
            g = g.product(self);
        }
        g
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin(&self) -> &[T] {
        &self.origin
    }

    pub fn spacing(&self) -> &[T] {
        &self.spacing
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn min_spacing(&self) -> T {
        self.spacing.iter().fold(T::infinity(), |m, &h| m.min(h))
    }

    pub fn cell_volume(&self) -> T {
        self.spacing.iter().fold(T::one(), |v, &h| v * h)
    }

    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> T {
        self.origin[axis] + T::of_usize(i) * self.spacing[axis]
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for a in (0..self.dim().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.shape[a + 1];
        }
        strides
    }

    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.shape[a];
            flat /= self.shape[a];
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vec<T> {
        let idx = self.unravel(flat);
        idx.iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }

    /// Writes the coordinates of node `flat` into `out`.
    pub fn node_into(&self, mut flat: usize, out: &mut [T]) {
        for a in (0..self.dim()).rev() {
            let i = flat % self.shape[a];
            flat /= self.shape[a];
            out[a] = self.coord(a, i);
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<T> {
        (0..self.shape[axis]).map(|i| self.coord(axis, i)).collect()
    }

    /// Grid with every coordinate shifted by `delta`.
    pub fn translated(&self, delta: &[T]) -> Grid<T> {
        let origin = self.origin.iter().zip(delta).map(|(&o, &d)| o + d).collect();
        Grid { origin, spacing: self.spacing.clone(), shape: self.shape.clone() }
    }
}

/// Scalar values on the nodes of a [`Grid`], tagged with a time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField<T> {
    pub grid: Grid<T>,
    pub values: Vec<T>,
    pub time: T,
}

impl<T: Real> GridField<T> {
    pub fn new(grid: Grid<T>, values: Vec<T>, time: T) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("grid field values"));
        }
        Ok(Self { grid, values, time })
    }

    pub fn zeros(grid: Grid<T>) -> Self {
        let values = vec![T::zero(); grid.len()];
        Self { grid, values, time: T::zero() }
    }

    pub fn from_fn(grid: Grid<T>, mut f: impl FnMut(&[T]) -> T) -> Self {
        let mut x = vec![T::zero(); grid.dim()];
        let values = (0..grid.len())
            .map(|k| {
                grid.node_into(k, &mut x);
                f(&x)
            })
            .collect();
        Self { grid, values, time: T::zero() }
    }

    /// Riemann sum over the nodes.
    pub fn integral(&self) -> T {
        compensated_sum(self.values.iter().copied()) * self.grid.cell_volume()
    }

    pub fn sup_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Discrete L2 distance `sqrt(sum (a - b)^2 * cell_volume)`.
    pub fn l2_distance(&self, other: &GridField<T>) -> Result<T> {
        if self.grid != other.grid {
            return Err(Error::DimensionMismatch("fields live on different grids".into()));
        }
        let ss = compensated_sum(self.values.iter().zip(&other.values).map(|(&a, &b)| (a - b) * (a - b)));
        Ok((ss * self.grid.cell_volume()).sqrt())
    }
}
