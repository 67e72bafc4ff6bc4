//! Random-field primitives: the environment kernel `h`, its self-correlation
//! `rho`, the branching correlation `kappa`, and discretized space-time white
//! noise.
//!
//! `h` is stored in separable form `h(x) = phi(x_1) ... phi(x_d) * C` with a
//! one-dimensional profile `phi` and a constant `d x d` coefficient matrix `C`.
//! Then `rho(x) = a(x_1) ... a(x_d) * C C^T`, where `a` is the autocorrelation
//! of `phi`, so `rho` only needs a one-dimensional quadrature table.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::linalg::{GaussianFactor, SymMatrix};
use crate::scalar::{standard_normal, Real};
use crate::seed::substream;

/// One-dimensional profile of the environment kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile<T> {
    /// Indicator of `[0, width)`.
    Box { width: T },
    /// `max(0, 1 - |x| / half_width)`.
    Hat { half_width: T },
    /// `exp(-x^2 / (2 sigma^2))` for `|x| <= cutoff * sigma`, zero beyond.
    Gauss { sigma: T, cutoff: T },
    Zero,
}

impl<T: Real> Profile<T> {
    #[inline]
    pub fn eval(&self, x: T) -> T {
        match *self {
            Profile::Box { width } => {
                if x >= T::zero() && x < width {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Profile::Hat { half_width } => (T::one() - x.abs() / half_width).max(T::zero()),
            Profile::Gauss { sigma, cutoff } => {
                if x.abs() <= cutoff * sigma {
                    (-(x * x) / (T::two() * sigma * sigma)).exp()
                } else {
                    T::zero()
                }
            }
            Profile::Zero => T::zero(),
        }
    }

    /// Radius beyond which the profile vanishes.
    pub fn support_radius(&self) -> T {
        match *self {
            Profile::Box { width } => width,
            Profile::Hat { half_width } => half_width,
            Profile::Gauss { sigma, cutoff } => sigma * cutoff,
            Profile::Zero => T::zero(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Profile::Box { width } => width > T::zero() && width.is_finite(),
            Profile::Hat { half_width } => half_width > T::zero() && half_width.is_finite(),
            Profile::Gauss { sigma, cutoff } => {
                sigma > T::zero() && cutoff > T::zero() && (sigma * cutoff).is_finite()
            }
            Profile::Zero => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid kernel profile {self:?}")))
        }
    }
}

/// Midpoint rule for `f` on `[lo, hi]` with `cells` cells.
fn midpoint<T: Real>(lo: T, hi: T, cells: usize, mut f: impl FnMut(T) -> T) -> T {
    let step = (hi - lo) / T::of_usize(cells);
    let mut acc = T::zero();
    for j in 0..cells {
        acc += f(lo + (T::of_usize(j) + T::half()) * step);
    }
    acc * step
}

/// The `d x d` environment kernel `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixKernel<T> {
    dim: usize,
    profile: Profile<T>,
    coeff: Vec<T>,
    support_radius: T,
    l2_norm_sq: T,
    sobolev_bound: T,
}

impl<T: Real> MatrixKernel<T> {
    pub fn new(dim: usize, profile: Profile<T>, coeff: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("kernel dimension must be positive".into()));
        }
        if coeff.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!("{} coefficients for a {dim}x{dim} kernel", coeff.len())));
        }
        if coeff.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("kernel coefficients"));
        }
        profile.validate()?;
        let support_radius = profile.support_radius();
        let frob_sq = coeff.iter().fold(T::zero(), |s, &c| s + c * c);
        let l2_norm_sq = if support_radius > T::zero() {
            let profile_sq = midpoint(-support_radius, support_radius, 4096, |x| {
                let p = profile.eval(x);
                p * p
            });
            profile_sq.powi(dim as i32) * frob_sq
        } else {
            T::zero()
        };
        Ok(Self { dim, profile, coeff, support_radius, l2_norm_sq, sobolev_bound: l2_norm_sq })
    }

    /// `h = amplitude * phi(x_1)...phi(x_d) * I`.
    pub fn isotropic(dim: usize, profile: Profile<T>, amplitude: T) -> Result<Self> {
        let mut coeff = vec![T::zero(); dim * dim];
        for i in 0..dim {
            coeff[i * dim + i] = amplitude;
        }
        Self::new(dim, profile, coeff)
    }

    pub fn zero(dim: usize) -> Self {
        Self::isotropic(dim, Profile::Zero, T::zero()).expect("zero kernel is valid")
    }

    /// Replaces the configured bound on `||h||_{3,2}^2` (defaults to `||h||_2^2`).
    pub fn with_sobolev_bound(mut self, bound: T) -> Self {
        self.sobolev_bound = bound;
        self
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn profile(&self) -> Profile<T> {
        self.profile
    }

    pub fn coeff(&self) -> &[T] {
        &self.coeff
    }

    pub fn support_radius(&self) -> T {
        self.support_radius
    }

    /// Quadrature value of `sum_ij ||h^ij||_2^2`.
    pub fn l2_norm_sq(&self) -> T {
        self.l2_norm_sq
    }

    pub fn sobolev_bound(&self) -> T {
        self.sobolev_bound
    }

    pub fn is_zero(&self) -> bool {
        self.profile == Profile::Zero || self.coeff.iter().all(|&c| c == T::zero())
    }

    /// Product of the profile over the coordinates of `x`.
    #[inline]
    pub fn profile_at(&self, x: &[T]) -> T {
        x.iter().fold(T::one(), |p, &xi| p * self.profile.eval(xi))
    }

    /// Entries of `h(x)`, row-major.
    pub fn eval(&self, x: &[T]) -> Vec<T> {
        let p = self.profile_at(x);
        self.coeff.iter().map(|&c| c * p).collect()
    }

    /// Gaussian density bound constant `k = [2 (d * bound + 1)]^{-1}`.
    pub fn density_bound_constant(&self) -> T {
        T::one() / (T::two() * (T::of_usize(self.dim) * self.sobolev_bound + T::one()))
    }
}

/// `rho(x) = int h(z - x) h^T(z) dz`, tabulated by midpoint quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoKernel<T> {
    dim: usize,
    step: T,
    half: usize,
    /// Autocorrelation of the profile at `k * step`, `k = -half..=half`.
    table: Vec<T>,
    /// `C C^T`, row-major.
    outer: Vec<T>,
    rho0: Vec<T>,
    h_l2_norm_sq: T,
}

/// Default quadrature step: `support_radius / 256`.
pub fn default_quad_step<T: Real>(h: &MatrixKernel<T>) -> T {
    if h.support_radius() > T::zero() {
        h.support_radius() / T::lit(256.0)
    } else {
        T::one()
    }
}

pub fn build_rho<T: Real>(h: &MatrixKernel<T>, quad_step: T) -> Result<RhoKernel<T>> {
    if !(quad_step > T::zero()) || !quad_step.is_finite() {
        return Err(Error::InvalidArgument("quadrature step must be positive".into()));
    }
    let radius = h.support_radius();
    if !radius.is_finite() {
        return Err(Error::InvalidArgument("environment kernel must have finite support".into()));
    }
    let d = h.dim();
    let cells = (T::two() * radius / quad_step).ceil().to_usize().unwrap_or(0).max(1);
    let half = cells + 1;
    let profile = h.profile();
    let table: Vec<T> = if h.is_zero() {
        vec![T::zero(); 2 * half + 1]
    } else {
        // the integration window [-R, R] is widened to a whole number of steps
        let lo = -T::of_usize(cells) * quad_step * T::half();
        let hi = -lo;
        (0..=2 * half)
            .map(|k| {
                let shift = (T::of_usize(k) - T::of_usize(half)) * quad_step;
                midpoint(lo, hi, cells, |z| profile.eval(z - shift) * profile.eval(z))
            })
            .collect()
    };
    let c = h.coeff();
    let mut outer = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = T::zero();
            for k in 0..d {
                s += c[i * d + k] * c[j * d + k];
            }
            outer[i * d + j] = s;
        }
    }
    let mut rho = RhoKernel { dim: d, step: quad_step, half, table, outer, rho0: Vec::new(), h_l2_norm_sq: h.l2_norm_sq() };
    let zero = vec![T::zero(); d];
    rho.rho0 = rho.eval(&zero);
    Ok(rho)
}

impl<T: Real> RhoKernel<T> {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn quad_step(&self) -> T {
        self.step
    }

    /// `rho(0)`, row-major.
    pub fn rho0(&self) -> &[T] {
        &self.rho0
    }

    pub fn outer(&self) -> &[T] {
        &self.outer
    }

    /// `||h||_2^2` of the kernel this was built from.
    pub fn h_l2_norm_sq(&self) -> T {
        self.h_l2_norm_sq
    }

    /// Largest `|x_i|` with a nonzero table entry.
    pub fn support_radius(&self) -> T {
        T::of_usize(self.half) * self.step
    }

    /// Linear interpolation of the profile autocorrelation.
    #[inline]
    pub fn autocorrelation(&self, tau: T) -> T {
        let u = tau / self.step + T::of_usize(self.half);
        if !(u >= T::zero()) {
            return T::zero();
        }
        let i = u.floor().to_usize().unwrap_or(usize::MAX);
        if i >= 2 * self.half {
            return if i == 2 * self.half && u == u.floor() { self.table[i] } else { T::zero() };
        }
        let frac = u - T::of_usize(i);
        self.table[i] + frac * (self.table[i + 1] - self.table[i])
    }

    /// Scalar factor `a(x_1)...a(x_d)` with `rho(x) = factor * C C^T`.
    #[inline]
    pub fn scalar(&self, x: &[T]) -> T {
        x.iter().fold(T::one(), |p, &xi| p * self.autocorrelation(xi))
    }

    pub fn eval_into(&self, x: &[T], out: &mut [T]) {
        let s = self.scalar(x);
        for (o, &c) in out.iter_mut().zip(&self.outer) {
            *o = s * c;
        }
    }

    /// Entries of `rho(x)`, row-major.
    pub fn eval(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim * self.dim];
        self.eval_into(x, &mut out);
        out
    }

    /// Hilbert-Schmidt norm of `rho(x)`.
    pub fn hs_norm(&self, x: &[T]) -> T {
        self.eval(x).iter().fold(T::zero(), |s, &v| s + v * v).sqrt()
    }
}

/// Whether the correlation kernel meets the decay hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    VanishingAtInfinity,
    /// Constant kernels do not vanish at infinity; used only for closed-form checks.
    ConstantTestMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrelationKernel<T> {
    /// `amplitude * exp(-|x-y|^2 / scale^2) * exp(-(|x|^2 + |y|^2) / (2 envelope^2))`.
    Gauss { amplitude: T, scale: T, envelope: T },
    /// `kappa(x, y) = value` everywhere.
    Constant { value: T },
}

impl<T: Real> CorrelationKernel<T> {
    pub fn gauss(amplitude: T, scale: T, envelope: T) -> Result<Self> {
        if !(amplitude >= T::zero()) || !(scale > T::zero()) || !(envelope > T::zero()) {
            return Err(Error::InvalidArgument("gauss correlation needs amplitude >= 0, scale > 0, envelope > 0".into()));
        }
        Ok(CorrelationKernel::Gauss { amplitude, scale, envelope })
    }

    pub fn constant(value: T) -> Result<Self> {
        if !(value >= T::zero()) || !value.is_finite() {
            return Err(Error::InvalidArgument("constant correlation must be finite and nonnegative".into()));
        }
        Ok(CorrelationKernel::Constant { value })
    }

    pub fn zero() -> Self {
        CorrelationKernel::Constant { value: T::zero() }
    }

    #[inline]
    pub fn eval(&self, x: &[T], y: &[T]) -> T {
        match *self {
            CorrelationKernel::Gauss { amplitude, scale, envelope } => {
                let mut dist = T::zero();
                let mut norms = T::zero();
                for (&a, &b) in x.iter().zip(y) {
                    dist += (a - b) * (a - b);
                    norms += a * a + b * b;
                }
                amplitude * (-dist / (scale * scale) - norms / (T::two() * envelope * envelope)).exp()
            }
            CorrelationKernel::Constant { value } => value,
        }
    }

    pub fn sup_norm(&self) -> T {
        match *self {
            CorrelationKernel::Gauss { amplitude, .. } => amplitude,
            CorrelationKernel::Constant { value } => value,
        }
    }

    pub fn decay(&self) -> Decay {
        match self {
            CorrelationKernel::Gauss { .. } => Decay::VanishingAtInfinity,
            CorrelationKernel::Constant { .. } => Decay::ConstantTestMode,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sup_norm() == T::zero()
    }

    /// Gram matrix over `points` (flat, `dim` coordinates each).
    pub fn gram(&self, points: &[T], dim: usize) -> SymMatrix<T> {
        let m = points.len() / dim;
        SymMatrix::from_lower_fn(m, |i, j| self.eval(&points[i * dim..(i + 1) * dim], &points[j * dim..(j + 1) * dim]))
    }
}

/// Draws the branching field at `positions` and clamps it to `[-truncation, truncation]`.
///
/// The field is Gaussian with covariance `kappa`, which is symmetric and has
/// moments of every order.
pub fn sample_branching_field<T: Real, R: Rng + ?Sized>(
    kappa: &CorrelationKernel<T>,
    positions: &[T],
    dim: usize,
    truncation: T,
    rng: &mut R,
) -> Result<Vec<T>> {
    if positions.is_empty() || dim == 0 || !positions.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument("branching field needs at least one position".into()));
    }
    if !(truncation > T::zero()) {
        return Err(Error::InvalidArgument("truncation must be positive".into()));
    }
    let m = positions.len() / dim;
    let mut values = match *kappa {
        // rank one: a single shared draw
        CorrelationKernel::Constant { value } => {
            let z: T = standard_normal(rng);
            vec![value.sqrt() * z; m]
        }
        CorrelationKernel::Gauss { .. } => {
            let gram = kappa.gram(positions, dim);
            GaussianFactor::new(&gram)?.sample(rng)
        }
    };
    for v in &mut values {
        *v = v.max(-truncation).min(truncation);
    }
    Ok(values)
}

/// Space-time white noise on a cell grid: each cell and step carries an
/// independent `N(0, dt * cell_volume)` vector with `dim` components.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteNoiseGrid<T> {
    grid: Grid<T>,
    dt: T,
    steps: usize,
    increments: Vec<T>,
    seed: u64,
}

impl<T: Real> WhiteNoiseGrid<T> {
    /// Grid nodes are cell centers. Step `s` uses its own substream of `seed`.
    pub fn sample(grid: Grid<T>, dt: T, steps: usize, seed: u64) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidArgument("white-noise time step must be positive".into()));
        }
        let comps = grid.dim();
        let cells = grid.len();
        let sd = (dt * grid.cell_volume()).sqrt();
        let mut increments = Vec::with_capacity(steps * cells * comps);
        for s in 0..steps {
            let mut rng = substream(seed, "white-noise", s as u64);
            for _ in 0..cells * comps {
                let z: T = standard_normal(&mut rng);
                increments.push(sd * z);
            }
        }
        Ok(Self { grid, dt, steps, increments, seed })
    }

    /// Rebuilds a realization from stored parts.
    pub fn from_parts(grid: Grid<T>, dt: T, steps: usize, increments: Vec<T>, seed: u64) -> Result<Self> {
        if increments.len() != steps * grid.len() * grid.dim() {
            return Err(Error::DimensionMismatch("white-noise increment count".into()));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("white-noise increments"));
        }
        Ok(Self { grid, dt, steps, increments, seed })
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[T] {
        &self.increments
    }

    /// Theoretical variance of one increment component.
    pub fn cell_variance(&self) -> T {
        self.dt * self.grid.cell_volume()
    }

    /// Increments of step `s`, laid out `[cell][component]`.
    pub fn step_increments(&self, s: usize) -> &[T] {
        let width = self.grid.len() * self.grid.dim();
        &self.increments[s * width..(s + 1) * width]
    }

    pub fn step_increments_mut(&mut self, s: usize) -> &mut [T] {
        let width = self.grid.len() * self.grid.dim();
        &mut self.increments[s * width..(s + 1) * width]
    }

    /// `out = sum_c h(y_c - x) dW_c` over the cells of step `s`.
    ///
    /// Returns `false` when part of the support of `h(. - x)` falls outside the grid.
    pub fn convolve(&self, h: &MatrixKernel<T>, s: usize, x: &[T], out: &mut [T]) -> bool {
        let d = self.grid.dim();
        debug_assert_eq!(x.len(), d);
        for o in out.iter_mut() {
            *o = T::zero();
        }
        if h.is_zero() {
            return true;
        }
        let radius = h.support_radius();
        let mut lo = vec![0usize; d];
        let mut hi = vec![0usize; d];
        let mut inside = true;
        for a in 0..d {
            let o = self.grid.origin()[a];
            let sp = self.grid.spacing()[a];
            let n = self.grid.shape()[a] as i64;
            let first = ((x[a] - radius - o) / sp).floor().to_i64().unwrap_or(i64::MIN);
            let last = ((x[a] + radius - o) / sp).ceil().to_i64().unwrap_or(i64::MAX);
            if first < 0 || last > n - 1 {
                inside = false;
            }
            let first = first.clamp(0, n);
            let last = last.clamp(-1, n - 1);
            if last < first {
                return false;
            }
            lo[a] = first as usize;
            hi[a] = last as usize;
        }
        let incs = self.step_increments(s);
        let strides = self.grid.strides();
        let profile = h.profile();
        // accumulate sum_c phi(y_c - x) dW_c, then apply C
        let mut acc = vec![T::zero(); d];
        let mut idx = lo.clone();
        loop {
            let mut weight = T::one();
            let mut flat = 0;
            for a in 0..d {
                let y = self.grid.coord(a, idx[a]);
                weight *= profile.eval(y - x[a]);
                flat += idx[a] * strides[a];
            }
            if weight != T::zero() {
                let w = &incs[flat * d..(flat + 1) * d];
                for (acc_j, &wj) in acc.iter_mut().zip(w) {
                    *acc_j += weight * wj;
                }
            }
            // odometer over the box [lo, hi]
            let mut a = d;
            loop {
                if a == 0 {
                    let c = h.coeff();
                    for i in 0..d {
                        let mut s_i = T::zero();
                        for j in 0..d {
                            s_i += c[i * d + j] * acc[j];
                        }
                        out[i] = s_i;
                    }
                    return inside;
                }
                a -= 1;
                if idx[a] < hi[a] {
                    idx[a] += 1;
                    break;
                }
                idx[a] = lo[a];
            }
        }
    }
}
