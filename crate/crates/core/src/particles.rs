//! Forward Monte Carlo of the branching particle system.
//!
//! Between branching times `k/n` every particle follows
//! `dx = dB + int h(y - x) W(dt, dy)` with its own Brownian motion `B` and a
//! white noise `W` shared by all particles. At each branching time a shared
//! field `xi` is drawn and every particle independently leaves 0, 1 or 2
//! children at its death position.

use std::fmt;

use num_rational::Ratio;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernels::{sample_branching_field, CorrelationKernel, MatrixKernel, RhoKernel, WhiteNoiseGrid};
use crate::linalg::{GaussianFactor, SymMatrix};
use crate::scalar::{standard_normal, uniform01, Real};

/// Rational time; branching times `k/n` and sub-steps are exact.
pub type Time = Ratio<u64>;

pub fn time_to_real<T: Real>(t: Time) -> T {
    T::lit(*t.numer() as f64) / T::lit(*t.denom() as f64)
}

/// Genealogical label `root.path[0].path[1]...` with digits in `{1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    pub root: u32,
    pub path: Vec<u8>,
}

impl MultiIndex {
    pub fn root(root: u32) -> Self {
        Self { root, path: Vec::new() }
    }

    /// `|alpha|`.
    pub fn generation(&self) -> usize {
        self.path.len()
    }

    pub fn child(&self, digit: u8) -> Self {
        debug_assert!(digit == 1 || digit == 2);
        let mut path = Vec::with_capacity(self.path.len() + 1);
        path.extend_from_slice(&self.path);
        path.push(digit);
        Self { root: self.root, path }
    }

    /// Ancestor at generation `k <= |alpha|`.
    pub fn ancestor(&self, k: usize) -> Self {
        Self { root: self.root, path: self.path[..k.min(self.path.len())].to_vec() }
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root)?;
        for d in &self.path {
            write!(f, ".{d}")?;
        }
        Ok(())
    }
}

/// Atomic measure with mass `1/n` on each atom.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure<T> {
    dim: usize,
    n: usize,
    atoms: Vec<T>,
}

impl<T: Real> EmpiricalMeasure<T> {
    /// `atoms` holds `dim` coordinates per atom.
    pub fn new(dim: usize, n: usize, atoms: Vec<T>) -> Result<Self> {
        if dim == 0 || n == 0 {
            return Err(Error::InvalidArgument("measure needs positive dimension and n".into()));
        }
        if !atoms.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch(format!("{} coordinates for dimension {dim}", atoms.len())));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("atom positions"));
        }
        Ok(Self { dim, n, atoms })
    }

    pub fn empty(dim: usize, n: usize) -> Self {
        Self { dim, n, atoms: Vec::new() }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[T] {
        &self.atoms
    }

    #[inline]
    pub fn atom(&self, i: usize) -> &[T] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn mass_per_atom(&self) -> T {
        T::one() / T::of_usize(self.n)
    }

    /// `X(1) = len / n`.
    pub fn total_mass(&self) -> T {
        T::of_usize(self.len()) / T::of_usize(self.n)
    }

    /// Every atom shifted by `delta`.
    pub fn translated(&self, delta: &[T]) -> Self {
        let atoms = self.atoms.iter().enumerate().map(|(i, &v)| v + delta[i % self.dim]).collect();
        Self { dim: self.dim, n: self.n, atoms }
    }
}

/// Law of the initial atoms; `n` i.i.d. draws give `X_0(1) = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialLaw<T> {
    /// Product of centered normals with standard deviation `sd`.
    Gauss { sd: T },
    /// Uniform on `[lo, hi]^d`.
    Uniform { lo: T, hi: T },
}

impl<T: Real> InitialLaw<T> {
    pub fn density(&self, x: &[T]) -> T {
        match *self {
            InitialLaw::Gauss { sd } => {
                let var = sd * sd;
                let norm = (T::two() * T::lit(std::f64::consts::PI) * var).sqrt();
                x.iter().fold(T::one(), |p, &xi| p * (-(xi * xi) / (T::two() * var)).exp() / norm)
            }
            InitialLaw::Uniform { lo, hi } => {
                let w = hi - lo;
                x.iter().fold(T::one(), |p, &xi| if xi >= lo && xi <= hi { p / w } else { T::zero() })
            }
        }
    }

    /// Bound on the density (finite for both laws).
    pub fn sup_density(&self, dim: usize) -> T {
        self.density(&vec![
            match *self {
                InitialLaw::Gauss { .. } => T::zero(),
                InitialLaw::Uniform { lo, hi } => (lo + hi) * T::half(),
            };
            dim
        ])
    }

    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, n: usize, rng: &mut R) -> Result<EmpiricalMeasure<T>> {
        let atoms = (0..n * dim)
            .map(|_| match *self {
                InitialLaw::Gauss { sd } => sd * standard_normal::<T, _>(rng),
                InitialLaw::Uniform { lo, hi } => lo + (hi - lo) * uniform01::<T, _>(rng),
            })
            .collect();
        EmpiricalMeasure::new(dim, n, atoms)
    }
}

/// How the shared white-noise part of the motion is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionMode<T> {
    /// Exact Gaussian increment with covariance `dt (delta I + rho(x_k1 - x_k2))`.
    CoupledExact,
    /// As `CoupledExact`, but above `threshold` particles the covariance is
    /// factorized in blocks of at most `block` particles after sorting by the
    /// first coordinate; correlations across blocks are dropped.
    BlockDiagonal { threshold: usize, block: usize },
    /// A fresh white-noise lattice of the given spacing each sub-step; the
    /// W-integral is the cell sum `sum_c h(y_c - x) dW_c`.
    FrozenGrid { spacing: T },
}

#[derive(Debug, Clone)]
pub struct MotionConfig<T> {
    n: usize,
    substeps: usize,
    dt: Time,
    h: MatrixKernel<T>,
    rho: RhoKernel<T>,
    mode: MotionMode<T>,
}

impl<T: Real> MotionConfig<T> {
    /// Sub-step `dt = 1 / (n * substeps)`.
    pub fn new(n: usize, substeps: usize, h: MatrixKernel<T>, rho: RhoKernel<T>, mode: MotionMode<T>) -> Result<Self> {
        if n == 0 || substeps == 0 {
            return Err(Error::InvalidArgument("branching rate and sub-steps must be positive".into()));
        }
        if h.dim() != rho.dim() {
            return Err(Error::DimensionMismatch("kernel and rho dimensions differ".into()));
        }
        match mode {
            MotionMode::BlockDiagonal { block: 0, .. } => {
                return Err(Error::InvalidArgument("block size must be positive".into()));
            }
            MotionMode::FrozenGrid { spacing } if !(spacing > T::zero()) => {
                return Err(Error::InvalidArgument("frozen-grid spacing must be positive".into()));
            }
            _ => {}
        }
        let dt = Time::new(1, (n * substeps) as u64);
        Ok(Self { n, substeps, dt, h, rho, mode })
    }

    pub fn dim(&self) -> usize {
        self.h.dim()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    pub fn dt(&self) -> Time {
        self.dt
    }

    pub fn h(&self) -> &MatrixKernel<T> {
        &self.h
    }

    pub fn rho(&self) -> &RhoKernel<T> {
        &self.rho
    }

    pub fn mode(&self) -> MotionMode<T> {
        self.mode
    }
}

/// Covariance `dt (delta_{k1 k2} I + rho(x_k1 - x_k2))` of the stacked increments of `idx`.
fn increment_covariance<T: Real>(positions: &[T], idx: &[usize], rho: &RhoKernel<T>, dt: T) -> SymMatrix<T> {
    let d = rho.dim();
    let m = idx.len();
    let mut cov = SymMatrix::zeros(m * d);
    let mut diff = vec![T::zero(); d];
    let outer = rho.outer();
    for a in 0..m {
        let xa = &positions[idx[a] * d..(idx[a] + 1) * d];
        for b in 0..=a {
            let xb = &positions[idx[b] * d..(idx[b] + 1) * d];
            for i in 0..d {
                diff[i] = xa[i] - xb[i];
            }
            let s = rho.scalar(&diff);
            for i in 0..d {
                for j in 0..d {
                    let (r, c) = (a * d + i, b * d + j);
                    if c > r {
                        continue;
                    }
                    let mut v = s * outer[i * d + j] * dt;
                    if a == b && i == j {
                        v += dt;
                    }
                    cov.set(r, c, v);
                    cov.set(c, r, v);
                }
            }
        }
    }
    cov
}

fn coupled_increments<T: Real, R: Rng + ?Sized>(
    positions: &[T],
    idx: &[usize],
    rho: &RhoKernel<T>,
    dt: T,
    rng: &mut R,
    out: &mut [T],
) -> Result<()> {
    let d = rho.dim();
    let cov = increment_covariance(positions, idx, rho, dt);
    let draw = GaussianFactor::new(&cov)?.sample(rng);
    for (a, &k) in idx.iter().enumerate() {
        out[k * d..(k + 1) * d].copy_from_slice(&draw[a * d..(a + 1) * d]);
    }
    Ok(())
}

/// One Euler sub-step of all `positions` (flat, `d` coordinates each).
pub fn motion_step<T: Real, R: Rng + ?Sized>(positions: &[T], cfg: &MotionConfig<T>, rng: &mut R) -> Result<Vec<T>> {
    let d = cfg.dim();
    if !positions.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch("positions are not a multiple of the dimension".into()));
    }
    if positions.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("particle positions"));
    }
    let m = positions.len() / d;
    let mut next = positions.to_vec();
    if m == 0 {
        return Ok(next);
    }
    let dt: T = time_to_real(cfg.dt);
    let mut inc = vec![T::zero(); m * d];
    match cfg.mode {
        MotionMode::CoupledExact => {
            let idx: Vec<usize> = (0..m).collect();
            coupled_increments(positions, &idx, &cfg.rho, dt, rng, &mut inc)?;
        }
        MotionMode::BlockDiagonal { threshold, block } => {
            let mut idx: Vec<usize> = (0..m).collect();
            if m > threshold {
                idx.sort_by(|&a, &b| positions[a * d].partial_cmp(&positions[b * d]).expect("finite positions"));
                for chunk in idx.chunks(block) {
                    coupled_increments(positions, chunk, &cfg.rho, dt, rng, &mut inc)?;
                }
            } else {
                coupled_increments(positions, &idx, &cfg.rho, dt, rng, &mut inc)?;
            }
        }
        MotionMode::FrozenGrid { spacing } => {
            let sd = dt.sqrt();
            for v in inc.iter_mut() {
                *v = sd * standard_normal::<T, _>(rng);
            }
            if !cfg.h.is_zero() {
                let noise = lattice_noise(positions, d, cfg.h.support_radius(), spacing, dt, rng)?;
                let mut w = vec![T::zero(); d];
                for k in 0..m {
                    noise.convolve(&cfg.h, 0, &positions[k * d..(k + 1) * d], &mut w);
                    for i in 0..d {
                        inc[k * d + i] += w[i];
                    }
                }
            }
        }
    }
    for (x, dx) in next.iter_mut().zip(&inc) {
        *x += *dx;
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("particle positions"));
    }
    Ok(next)
}

/// One step of white noise on a lattice covering every particle's kernel support.
fn lattice_noise<T: Real, R: Rng + ?Sized>(
    positions: &[T],
    d: usize,
    radius: T,
    spacing: T,
    dt: T,
    rng: &mut R,
) -> Result<WhiteNoiseGrid<T>> {
    let mut origin = Vec::with_capacity(d);
    let mut shape = Vec::with_capacity(d);
    for a in 0..d {
        let (lo, hi) = positions
            .iter()
            .skip(a)
            .step_by(d)
            .fold((T::infinity(), T::neg_infinity()), |(l, h), &x| (l.min(x), h.max(x)));
        // lattice aligned to multiples of the spacing, cell centers at (i + 1/2) * spacing
        let first = ((lo - radius) / spacing).floor() - T::one();
        let last = ((hi + radius) / spacing).ceil() + T::one();
        origin.push((first + T::half()) * spacing);
        shape.push((last - first).to_usize().unwrap_or(1).max(1));
    }
    let grid = Grid::new(origin, vec![spacing; d], shape)?;
    WhiteNoiseGrid::sample(grid, dt, 1, rng.random())
}

/// Alive particles at branching resolution `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem<T> {
    dim: usize,
    n: usize,
    time: Time,
    generation: usize,
    positions: Vec<T>,
    indices: Vec<MultiIndex>,
}

impl<T: Real> ParticleSystem<T> {
    /// Root particles `1..=len` at the atoms of `init`, time 0.
    pub fn from_measure(init: &EmpiricalMeasure<T>) -> Self {
        let indices = (1..=init.len() as u32).map(MultiIndex::root).collect();
        Self {
            dim: init.dim(),
            n: init.n(),
            time: Time::from_integer(0),
            generation: 0,
            positions: init.atoms().to_vec(),
            indices,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> Time {
        self.time
    }

    /// Number of branchings performed so far.
    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn measure(&self) -> EmpiricalMeasure<T> {
        EmpiricalMeasure { dim: self.dim, n: self.n, atoms: self.positions.clone() }
    }

    /// Moves every particle by one sub-step and advances the clock by `dt`.
    pub fn advance<R: Rng + ?Sized>(&mut self, cfg: &MotionConfig<T>, rng: &mut R) -> Result<()> {
        if cfg.dim() != self.dim || cfg.n() != self.n {
            return Err(Error::DimensionMismatch("motion config does not match the system".into()));
        }
        self.positions = motion_step(&self.positions, cfg, rng)?;
        self.time += cfg.dt;
        Ok(())
    }

    /// Whether the clock sits on the next branching time.
    pub fn at_branching_time(&self) -> bool {
        self.time == Time::new((self.generation + 1) as u64, self.n as u64)
    }
}

/// Outcome of one branching event.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchReport<T> {
    /// Clamped field value seen by each parent.
    pub xi: Vec<T>,
    /// Offspring count of each parent.
    pub offspring: Vec<u8>,
    pub parents: Vec<MultiIndex>,
}

/// Draws offspring counts for given field values; `sqrt_n` is the truncation level.
pub fn offspring_counts<T: Real, R: Rng + ?Sized>(xi: &[T], sqrt_n: T, rng: &mut R) -> Vec<u8> {
    xi.iter()
        .map(|&x| {
            let p2 = x.max(T::zero()) / sqrt_n;
            let p0 = (-x).max(T::zero()) / sqrt_n;
            assert!(p2 + p0 <= T::one() + T::epsilon(), "offspring probabilities exceed one");
            let u: T = uniform01(rng);
            if u < p2 {
                2
            } else if u < p2 + p0 {
                0
            } else {
                1
            }
        })
        .collect()
}

/// Replaces every particle by its offspring at a branching time.
pub fn branch<T: Real, R: Rng + ?Sized>(
    sys: &mut ParticleSystem<T>,
    kappa: &CorrelationKernel<T>,
    rng: &mut R,
) -> Result<BranchReport<T>> {
    if !sys.at_branching_time() {
        return Err(Error::InvalidArgument(format!(
            "branching at time {} but the next branching time is {}/{}",
            sys.time,
            sys.generation + 1,
            sys.n
        )));
    }
    sys.generation += 1;
    if sys.is_empty() {
        return Ok(BranchReport { xi: Vec::new(), offspring: Vec::new(), parents: Vec::new() });
    }
    let sqrt_n = T::of_usize(sys.n).sqrt();
    let xi = sample_branching_field(kappa, &sys.positions, sys.dim, sqrt_n, rng)?;
    let offspring = offspring_counts(&xi, sqrt_n, rng);
    let d = sys.dim;
    let total: usize = offspring.iter().map(|&c| c as usize).sum();
    let mut positions = Vec::with_capacity(total * d);
    let mut indices = Vec::with_capacity(total);
    for (k, &count) in offspring.iter().enumerate() {
        for digit in 1..=count {
            positions.extend_from_slice(&sys.positions[k * d..(k + 1) * d]);
            indices.push(sys.indices[k].child(digit));
        }
    }
    let parents = std::mem::replace(&mut sys.indices, indices);
    sys.positions = positions;
    Ok(BranchReport { xi, offspring, parents })
}

/// When snapshots are recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotSchedule {
    /// Time 0 and every branching time (left limits).
    BranchTimes,
    /// Every sub-step; at branching times the left limit.
    EverySubstep,
}

#[derive(Debug, Clone)]
pub struct SimConfig<T> {
    pub motion: MotionConfig<T>,
    pub kappa: CorrelationKernel<T>,
    pub particle_cap: usize,
    pub schedule: SnapshotSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    pub time: Time,
    pub measure: EmpiricalMeasure<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub n: usize,
    /// Left-limit snapshots, time 0 first and the horizon last.
    pub snapshots: Vec<Snapshot<T>>,
    /// State after the branching at the horizon.
    pub terminal: EmpiricalMeasure<T>,
    /// First branching time after which no particle was alive.
    pub extinction: Option<Time>,
    pub branch_events: usize,
}

impl<T: Real> Trajectory<T> {
    pub fn times(&self) -> Vec<Time> {
        self.snapshots.iter().map(|s| s.time).collect()
    }
}

/// Runs the system from `init` up to `horizon`, which must be a multiple of `1/n`.
pub fn simulate<T: Real, R: Rng + ?Sized>(
    init: &EmpiricalMeasure<T>,
    horizon: Time,
    cfg: &SimConfig<T>,
    rng: &mut R,
) -> Result<Trajectory<T>> {
    let n = cfg.motion.n();
    if init.n() != n || init.dim() != cfg.motion.dim() {
        return Err(Error::DimensionMismatch("initial measure does not match the motion config".into()));
    }
    let scaled = horizon * Time::from_integer(n as u64);
    if !scaled.is_integer() {
        return Err(Error::InvalidArgument(format!("horizon {horizon} is not a multiple of 1/{n}")));
    }
    let intervals = scaled.to_integer() as usize;
    let mut sys = ParticleSystem::from_measure(init);
    if sys.len() > cfg.particle_cap {
        return Err(Error::Budget { count: sys.len(), cap: cfg.particle_cap });
    }
    let mut snapshots = vec![Snapshot { time: sys.time, measure: sys.measure() }];
    let mut extinction = None;
    for _ in 0..intervals {
        for s in 0..cfg.motion.substeps() {
            sys.advance(&cfg.motion, rng)?;
            if cfg.schedule == SnapshotSchedule::EverySubstep || s + 1 == cfg.motion.substeps() {
                snapshots.push(Snapshot { time: sys.time, measure: sys.measure() });
            }
        }
        branch(&mut sys, &cfg.kappa, rng)?;
        if sys.len() > cfg.particle_cap {
            return Err(Error::Budget { count: sys.len(), cap: cfg.particle_cap });
        }
        if sys.is_empty() && extinction.is_none() {
            extinction = Some(sys.time);
        }
    }
    Ok(Trajectory { n, snapshots, terminal: sys.measure(), extinction, branch_events: intervals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_rho, default_quad_step, Profile};
    use crate::scalar::Estimate;
    use crate::seed::substream;
    use proptest::prelude::*;

    fn box_kernel() -> (MatrixKernel<f64>, RhoKernel<f64>) {
        let h = MatrixKernel::isotropic(1, Profile::Box { width: 1.0 }, 1.0).unwrap();
        let rho = build_rho(&h, default_quad_step(&h)).unwrap();
        (h, rho)
    }

    fn config(n: usize, m: usize, h: MatrixKernel<f64>, rho: RhoKernel<f64>, kappa: CorrelationKernel<f64>) -> SimConfig<f64> {
        SimConfig {
            motion: MotionConfig::new(n, m, h, rho, MotionMode::CoupledExact).unwrap(),
            kappa,
            particle_cap: 100_000,
            schedule: SnapshotSchedule::BranchTimes,
        }
    }

    #[test]
    fn multi_index_ancestry() {
        let a = MultiIndex::root(3).child(2).child(1).child(2);
        assert_eq!(a.generation(), 3);
        assert_eq!(a.ancestor(1), MultiIndex::root(3).child(2));
        assert_eq!(a.ancestor(0), MultiIndex::root(3));
        assert_eq!(a.to_string(), "3.2.1.2");
    }

    #[test]
    fn pure_brownian_without_kernel() {
        let h = MatrixKernel::<f64>::zero(1);
        let rho = build_rho(&h, 0.1).unwrap();
        let cfg = MotionConfig::new(1, 4, h, rho, MotionMode::CoupledExact).unwrap();
        let mut rng = substream(1, "t", 0);
        let incs: Vec<f64> = (0..40_000).map(|_| motion_step(&[0.0], &cfg, &mut rng).unwrap()[0]).collect();
        let est = Estimate::from_samples(&incs);
        assert!((est.variance() - 0.25).abs() < 0.01, "{}", est.variance());
    }

    #[test]
    fn box_kernel_doubles_increment_variance() {
        let (h, rho) = box_kernel();
        let cfg = MotionConfig::new(1, 4, h, rho, MotionMode::CoupledExact).unwrap();
        let mut rng = substream(2, "t", 0);
        let incs: Vec<f64> = (0..40_000).map(|_| motion_step(&[0.3], &cfg, &mut rng).unwrap()[0] - 0.3).collect();
        let est = Estimate::from_samples(&incs);
        assert!((est.variance() - 0.5).abs() < 0.02, "{}", est.variance());
    }

    #[test]
    fn coincident_particles_share_the_environment() {
        let (h, rho) = box_kernel();
        let cfg = MotionConfig::new(1, 1, h, rho, MotionMode::CoupledExact).unwrap();
        let mut rng = substream(3, "t", 0);
        let (mut s11, mut s22, mut s12, mut sdd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let reps = 100_000;
        for _ in 0..reps {
            let x = motion_step(&[0.0, 0.0], &cfg, &mut rng).unwrap();
            s11 += x[0] * x[0];
            s22 += x[1] * x[1];
            s12 += x[0] * x[1];
            sdd += (x[0] - x[1]) * (x[0] - x[1]);
        }
        // shared W part: correlation rho(0) / (1 + rho(0)) = 1/2; the difference is pure Brownian
        let corr: f64 = s12 / (s11 * s22).sqrt();
        assert!((corr - 0.5).abs() < 0.01, "{corr}");
        assert!((sdd / reps as f64 - 2.0).abs() < 0.03);
    }

    #[test]
    fn frozen_grid_matches_coupled_variance() {
        let (h, rho) = box_kernel();
        let cfg = MotionConfig::new(1, 1, h, rho, MotionMode::FrozenGrid { spacing: 1.0 / 16.0 }).unwrap();
        let mut rng = substream(4, "t", 0);
        let reps = 40_000;
        let (mut s11, mut s12) = (0.0f64, 0.0f64);
        for _ in 0..reps {
            let x = motion_step(&[0.1, 0.6], &cfg, &mut rng).unwrap();
            s11 += (x[0] - 0.1) * (x[0] - 0.1);
            s12 += (x[0] - 0.1) * (x[1] - 0.6);
        }
        assert!((s11 / reps as f64 - 2.0).abs() < 0.05);
        // rho(0.5) = 0.5
        assert!((s12 / reps as f64 - 0.5).abs() < 0.05);
    }

    #[test]
    fn block_diagonal_below_threshold_is_exact() {
        let (h, rho) = box_kernel();
        let exact = MotionConfig::new(2, 2, h.clone(), rho.clone(), MotionMode::CoupledExact).unwrap();
        let blocked = MotionConfig::new(2, 2, h, rho, MotionMode::BlockDiagonal { threshold: 10, block: 2 }).unwrap();
        let pos = [0.0, 0.4, -0.3];
        let a = motion_step(&pos, &exact, &mut substream(5, "t", 0)).unwrap();
        let b = motion_step(&pos, &blocked, &mut substream(5, "t", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_field_gives_unit_offspring() {
        let mut rng = substream(6, "t", 0);
        assert!(offspring_counts(&[0.0; 50], 10.0, &mut rng).iter().all(|&c| c == 1));
        assert!(offspring_counts(&[10.0; 50], 10.0, &mut rng).iter().all(|&c| c == 2));
        assert!(offspring_counts(&[-10.0; 50], 10.0, &mut rng).iter().all(|&c| c == 0));
    }

    #[test]
    fn constant_kappa_branching_is_critical() {
        let mut rng = substream(7, "t", 0);
        let kappa = CorrelationKernel::constant(1.0).unwrap();
        let n = 100usize;
        let sqrt_n = (n as f64).sqrt();
        let (mut counts, mut oracle) = (Vec::new(), Vec::new());
        for _ in 0..10_000 {
            let xi = sample_branching_field(&kappa, &[0.0], 1, sqrt_n, &mut rng).unwrap();
            counts.push(offspring_counts(&xi, sqrt_n, &mut rng)[0] as f64);
            oracle.push(1.0 + xi[0] / sqrt_n);
        }
        let est = Estimate::from_samples(&counts);
        assert!(est.z_score(1.0) < 3.0);
        let oracle_mean = oracle.iter().sum::<f64>() / oracle.len() as f64;
        assert!((est.mean - oracle_mean).abs() < 3.0 * est.stderr);
    }

    #[test]
    fn branch_requires_a_branching_time() {
        let init = EmpiricalMeasure::new(1, 2, vec![0.0, 1.0]).unwrap();
        let mut sys = ParticleSystem::from_measure(&init);
        let mut rng = substream(8, "t", 0);
        assert!(branch(&mut sys, &CorrelationKernel::zero(), &mut rng).is_err());
    }

    #[test]
    fn single_interval_without_noise() {
        let h = MatrixKernel::<f64>::zero(1);
        let rho = build_rho(&h, 0.1).unwrap();
        let cfg = config(1, 8, h, rho, CorrelationKernel::zero());
        let init = EmpiricalMeasure::new(1, 1, vec![0.25]).unwrap();
        let traj = simulate(&init, Time::from_integer(1), &cfg, &mut substream(9, "t", 0)).unwrap();
        assert_eq!(traj.branch_events, 1);
        assert_eq!(traj.times(), vec![Time::from_integer(0), Time::from_integer(1)]);
        assert!(traj.snapshots.iter().all(|s| s.measure.len() == 1));
        assert_eq!(traj.terminal.len(), 1);
    }

    #[test]
    fn deterministic_branching_conserves_mass_exactly() {
        let h = MatrixKernel::<f64>::zero(1);
        let rho = build_rho(&h, 0.1).unwrap();
        let cfg = config(20, 2, h, rho, CorrelationKernel::zero());
        let mut rng = substream(10, "t", 0);
        let init = InitialLaw::Gauss { sd: 0.5 }.sample(1, 20, &mut rng).unwrap();
        let traj = simulate(&init, Time::new(1, 2), &cfg, &mut rng).unwrap();
        assert!(traj.snapshots.iter().all(|s| s.measure.total_mass() == 1.0));
        assert_eq!(traj.terminal.total_mass(), 1.0);
    }

    #[test]
    fn horizon_must_be_a_branching_time() {
        let (h, rho) = box_kernel();
        let cfg = config(4, 2, h, rho, CorrelationKernel::zero());
        let init = EmpiricalMeasure::new(1, 4, vec![0.0; 4]).unwrap();
        assert!(simulate(&init, Time::new(1, 3), &cfg, &mut substream(11, "t", 0)).is_err());
    }

    #[test]
    fn particle_cap_is_a_budget_error() {
        let (h, rho) = box_kernel();
        let mut cfg = config(4, 1, h, rho, CorrelationKernel::constant(100.0).unwrap());
        cfg.particle_cap = 5;
        let init = EmpiricalMeasure::new(1, 4, vec![0.0; 4]).unwrap();
        let mut hit = false;
        for r in 0..50 {
            if let Err(e) = simulate(&init, Time::from_integer(3), &cfg, &mut substream(12, "t", r)) {
                assert!(e.is_budget());
                hit = true;
            }
        }
        assert!(hit);
    }

    #[test]
    fn extinction_is_reported_not_raised() {
        let (h, rho) = box_kernel();
        let cfg = config(1, 1, h, rho, CorrelationKernel::constant(100.0).unwrap());
        let init = EmpiricalMeasure::new(1, 1, vec![0.0]).unwrap();
        let mut extinct = 0;
        for r in 0..40 {
            let traj = simulate(&init, Time::from_integer(6), &cfg, &mut substream(13, "t", r)).unwrap();
            if let Some(t) = traj.extinction {
                extinct += 1;
                assert!(traj.snapshots.iter().filter(|s| s.time > t).all(|s| s.measure.is_empty()));
            }
        }
        assert!(extinct > 0);
    }

    #[test]
    fn genealogy_is_sound() {
        let (h, rho) = box_kernel();
        let motion = MotionConfig::new(10, 1, h, rho, MotionMode::CoupledExact).unwrap();
        let kappa = CorrelationKernel::gauss(4.0, 1.0, 4.0).unwrap();
        let mut rng = substream(14, "t", 0);
        let init = InitialLaw::Gauss { sd: 0.5 }.sample(1, 10, &mut rng).unwrap();
        let mut sys = ParticleSystem::from_measure(&init);
        let mut history: Vec<std::collections::HashMap<MultiIndex, u8>> = Vec::new();
        for _ in 0..8 {
            sys.advance(&motion, &mut rng).unwrap();
            let report = branch(&mut sys, &kappa, &mut rng).unwrap();
            history.push(report.parents.iter().cloned().zip(report.offspring.iter().copied()).collect());
            assert!(sys.indices().iter().all(|a| a.generation() == sys.generation()));
        }
        for alpha in sys.indices() {
            for k in 0..alpha.generation() {
                let anc = alpha.ancestor(k);
                let count = history[k].get(&anc).expect("ancestor existed");
                assert!(*count >= alpha.path[k]);
            }
        }
    }

    #[test]
    fn initial_law_has_unit_mass() {
        let mut rng = substream(15, "t", 0);
        let mu = InitialLaw::Uniform { lo: -1.0, hi: 1.0 }.sample(2, 50, &mut rng).unwrap();
        assert_eq!(mu.total_mass(), 1.0);
        assert_eq!(mu.len(), 50);
        assert!((InitialLaw::Uniform { lo: -1.0f64, hi: 1.0 }.sup_density(2) - 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mass_equals_count_over_n(seed in 0u64..200) {
            let (h, rho) = box_kernel();
            let cfg = config(10, 1, h, rho, CorrelationKernel::gauss(2.0, 1.0, 4.0).unwrap());
            let mut rng = substream(seed, "mass", 0);
            let init = InitialLaw::Gauss { sd: 0.5 }.sample(1, 10, &mut rng).unwrap();
            let traj = simulate(&init, Time::new(1, 2), &cfg, &mut rng).unwrap();
            for s in &traj.snapshots {
                prop_assert_eq!(s.measure.total_mass() * 10.0, s.measure.len() as f64);
                prop_assert!(s.measure.atoms().iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn identical_seeds_reproduce_trajectories(seed in 0u64..50) {
            let (h, rho) = box_kernel();
            let cfg = config(5, 2, h, rho, CorrelationKernel::gauss(1.0, 1.0, 4.0).unwrap());
            let init = EmpiricalMeasure::new(1, 5, vec![0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
            let a = simulate(&init, Time::from_integer(1), &cfg, &mut substream(seed, "r", 0)).unwrap();
            let b = simulate(&init, Time::from_integer(1), &cfg, &mut substream(seed, "r", 0)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
