//! Mild-form solver in one space dimension.
//!
//! Given a frozen environment `W`, the conditional transition density
//! `p^W(r, z; t, x)` is estimated by running many independent Brownian
//! particles through the same `W` and smoothing their positions with a heat
//! kernel. With a colored noise `V` the field
//!
//! `u(t, x) = int mu(z) p^W(0, z; t, x) dz + int_0^t int p^W(r, z; t, x) u(r, z) V(dr, dz)`
//!
//! is computed on a coarse time grid by Picard iteration, or directly by
//! marching forward in time since the discrete equation is causal.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField};
use crate::kernels::{CorrelationKernel, MatrixKernel, WhiteNoiseGrid};
use crate::linalg::GaussianFactor;
use crate::scalar::{standard_normal, Real};
use crate::seed::{stream, Label};

/// Discretization of a mild solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MildConfig<T> {
    pub horizon: T,
    /// Coarse steps of the shared time grid `t_j = j * horizon / coarse_steps`.
    pub coarse_steps: usize,
    /// Environment steps per coarse step.
    pub substeps: usize,
    /// Conditional paths per source point.
    pub paths: usize,
    /// Source points are every `z_stride`-th node of the x-grid.
    pub z_stride: usize,
    /// Environment cell size; at most `support_radius / 8` is used.
    pub w_spacing: Option<T>,
    /// Environment padding beyond the x-grid, in kernel support radii.
    pub padding_radii: T,
    pub max_exit_rate: T,
    /// Fixed KDE bandwidth; default `max(dx^2, (t - r) / 16)`.
    pub bandwidth: Option<T>,
}

impl<T: Real> MildConfig<T> {
    pub fn new(horizon: T) -> Self {
        Self {
            horizon,
            coarse_steps: 16,
            substeps: 4,
            paths: 1000,
            z_stride: 4,
            w_spacing: None,
            padding_radii: T::lit(4.0),
            max_exit_rate: T::lit(0.01),
            bandwidth: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > T::zero()) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument("mild horizon must be positive".into()));
        }
        if self.coarse_steps == 0 || self.substeps == 0 || self.paths == 0 || self.z_stride == 0 {
            return Err(Error::InvalidArgument("mild step, path and stride counts must be positive".into()));
        }
        if let Some(eps) = self.bandwidth {
            if !(eps > T::zero()) {
                return Err(Error::InvalidArgument("mild bandwidth must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn fine_steps(&self) -> usize {
        self.coarse_steps * self.substeps
    }

    pub fn fine_dt(&self) -> T {
        self.horizon / T::of_usize(self.fine_steps())
    }

    pub fn coarse_dt(&self) -> T {
        self.horizon / T::of_usize(self.coarse_steps)
    }
}

fn require_line<T: Real>(grid: &Grid<T>) -> Result<()> {
    if grid.dim() != 1 {
        return Err(Error::InvalidArgument("the mild solver is one-dimensional".into()));
    }
    if grid.len() < 2 {
        return Err(Error::GridTooSmall("x-grid needs at least two nodes".into()));
    }
    Ok(())
}

/// One realization of `W` over `[0, horizon]`, shared by every conditional path.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEnvironment<T> {
    h: MatrixKernel<T>,
    noise: WhiteNoiseGrid<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnvironmentHeader {
    schema: u32,
    steps: usize,
    cells: usize,
    origin: f64,
    spacing: f64,
    dt: f64,
    seed: u64,
}

impl<T: Real> FrozenEnvironment<T> {
    /// Cells of size `min(w_spacing, support / 8)` covering the x-grid padded
    /// by `padding_radii` support radii on both sides.
    pub fn sample(h: &MatrixKernel<T>, x_grid: &Grid<T>, cfg: &MildConfig<T>, seed: u64) -> Result<Self> {
        require_line(x_grid)?;
        cfg.validate()?;
        if h.dim() != 1 {
            return Err(Error::DimensionMismatch("environment kernel must be one-dimensional".into()));
        }
        let radius = h.support_radius();
        let spacing = if radius > T::zero() {
            let cap = radius / T::lit(8.0);
            cfg.w_spacing.map_or(cap, |s| s.min(cap))
        } else {
            cfg.w_spacing.unwrap_or(x_grid.spacing()[0])
        };
        let pad = cfg.padding_radii * radius;
        let lo = x_grid.origin()[0] - pad;
        let hi = x_grid.coord(0, x_grid.len() - 1) + pad;
        let cells = ((hi - lo) / spacing).ceil().to_usize().unwrap_or(1).max(1);
        let grid = Grid::new(vec![lo + spacing * T::half()], vec![spacing], vec![cells])?;
        let noise = WhiteNoiseGrid::sample(grid, cfg.fine_dt(), cfg.fine_steps(), seed)?;
        Ok(Self { h: h.clone(), noise })
    }

    pub fn from_noise(h: &MatrixKernel<T>, noise: WhiteNoiseGrid<T>) -> Result<Self> {
        if h.dim() != 1 || noise.grid().dim() != 1 {
            return Err(Error::DimensionMismatch("environment must be one-dimensional".into()));
        }
        Ok(Self { h: h.clone(), noise })
    }

    pub fn noise(&self) -> &WhiteNoiseGrid<T> {
        &self.noise
    }

    pub fn kernel(&self) -> &MatrixKernel<T> {
        &self.h
    }

    pub fn steps(&self) -> usize {
        self.noise.steps()
    }

    /// `int h(y - x) W(dt, dy)` over fine step `s` by cell summation; the flag
    /// is `false` when the kernel support around `x` leaves the grid.
    #[inline]
    pub fn w_integral(&self, s: usize, x: T) -> (T, bool) {
        if self.h.is_zero() {
            return (T::zero(), true);
        }
        let grid = self.noise.grid();
        let origin = grid.origin()[0];
        let spacing = grid.spacing()[0];
        let cells = grid.len() as i64;
        let radius = self.h.support_radius();
        let first = ((x - radius - origin) / spacing).floor().to_i64().unwrap_or(i64::MIN);
        let last = ((x + radius - origin) / spacing).ceil().to_i64().unwrap_or(i64::MAX);
        let inside = first >= 0 && last < cells;
        let first = first.max(0);
        let last = last.min(cells - 1);
        let incs = self.noise.step_increments(s);
        let profile = self.h.profile();
        let mut acc = T::zero();
        let mut c = first;
        while c <= last {
            let y = origin + T::of_usize(c as usize) * spacing;
            let w = profile.eval(y - x);
            if w != T::zero() {
                acc += w * incs[c as usize];
            }
            c += 1;
        }
        (acc * self.h.coeff()[0], inside)
    }

    /// Writes `<stem>.bin` (little-endian `f64` increments) and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let grid = self.noise.grid();
        let header = EnvironmentHeader {
            schema: 1,
            steps: self.noise.steps(),
            cells: grid.len(),
            origin: grid.origin()[0].as_f64(),
            spacing: grid.spacing()[0].as_f64(),
            dt: self.noise.dt().as_f64(),
            seed: self.noise.seed(),
        };
        let mut bytes = Vec::with_capacity(self.noise.increments().len() * 8);
        for v in self.noise.increments() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        fs::File::create(stem.with_extension("bin"))?.write_all(&bytes)?;
        fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&header)?)?;
        Ok(())
    }

    /// Reads an environment written by [`FrozenEnvironment::save`].
    pub fn load(h: &MatrixKernel<T>, stem: &Path) -> Result<Self> {
        let header: EnvironmentHeader = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        if header.schema != 1 {
            return Err(Error::InvalidArgument(format!("unknown environment schema {}", header.schema)));
        }
        let mut bytes = Vec::new();
        fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != header.steps * header.cells * 8 {
            return Err(Error::DimensionMismatch("environment file size does not match its header".into()));
        }
        let increments = bytes
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("eight bytes"))))
            .collect();
        let grid = Grid::new(vec![T::lit(header.origin)], vec![T::lit(header.spacing)], vec![header.cells])?;
        let noise = WhiteNoiseGrid::from_parts(grid, T::lit(header.dt), header.steps, increments, header.seed)?;
        Self::from_noise(h, noise)
    }
}

/// Adds `weight * p_eps(x - y)` to every x-grid node within eight standard deviations of `y`.
///
/// The Gaussian is evaluated by the recurrence
/// `g_{k+1} = g_k r_k`, `r_{k+1} = r_k exp(-dx^2 / eps)`.
fn splat<T: Real>(out: &mut [T], origin: T, dx: T, y: T, eps: T, weight: T) {
    let sigma = eps.sqrt();
    let reach = T::lit(8.0) * sigma;
    let n = out.len() as i64;
    let k0 = ((y - reach - origin) / dx).ceil().to_i64().unwrap_or(0).max(0);
    let k1 = ((y + reach - origin) / dx).floor().to_i64().unwrap_or(-1).min(n - 1);
    if k1 < k0 {
        return;
    }
    let two_eps = T::two() * eps;
    let norm = weight / (T::lit(std::f64::consts::PI) * two_eps).sqrt();
    let u = origin + T::of_usize(k0 as usize) * dx - y;
    let mut g = (-(u * u) / two_eps).exp() * norm;
    let mut r = (-(T::two() * u * dx + dx * dx) / two_eps).exp();
    let c = (-(dx * dx) / eps).exp();
    for v in &mut out[k0 as usize..=k1 as usize] {
        *v += g;
        g *= r;
        r *= c;
    }
}

/// KDE estimates of `p^W(r, z; t, x)` for one source time, several source
/// points and several target times.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDensity<T> {
    pub source_step: usize,
    pub source_time: T,
    pub z: Vec<T>,
    pub target_steps: Vec<usize>,
    pub target_times: Vec<T>,
    pub x_grid: Grid<T>,
    /// Laid out `[target][z][x]`.
    pub values: Vec<T>,
    pub paths: usize,
    pub exits: usize,
    pub bandwidths: Vec<T>,
}

impl<T: Real> ConditionalDensity<T> {
    pub fn slice(&self, target: usize, zi: usize) -> &[T] {
        let nx = self.x_grid.len();
        let nz = self.z.len();
        let start = (target * nz + zi) * nx;
        &self.values[start..start + nx]
    }

    /// `sum_x p(x) dx` for one target and source point.
    pub fn mass(&self, target: usize, zi: usize) -> T {
        self.slice(target, zi).iter().copied().sum::<T>() * self.x_grid.spacing()[0]
    }
}

/// Default KDE bandwidth `max(dx^2, (t - r) / 16)`.
pub fn default_bandwidth<T: Real>(dx: T, elapsed: T) -> T {
    (dx * dx).max(elapsed / T::lit(16.0))
}

/// Runs `paths` particles from each `z` starting at fine step `source_step`
/// through `env` and smooths their positions at each of `target_steps`.
///
/// Paths from `z[zi]` use the stream `(seed, "pw", source_step, zi)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_conditional_density<T: Real>(
    env: &FrozenEnvironment<T>,
    fine_dt: T,
    source_step: usize,
    z: &[T],
    target_steps: &[usize],
    x_grid: &Grid<T>,
    paths: usize,
    bandwidth: Option<T>,
    seed: u64,
) -> Result<ConditionalDensity<T>> {
    require_line(x_grid)?;
    if paths == 0 || z.is_empty() {
        return Err(Error::InvalidArgument("need at least one path and one source point".into()));
    }
    if target_steps.iter().any(|&t| t <= source_step) || target_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("target steps must increase and follow the source".into()));
    }
    let last = *target_steps.last().ok_or_else(|| Error::InvalidArgument("no target steps".into()))?;
    if last > env.steps() {
        return Err(Error::InvalidArgument(format!("environment covers {} steps, need {last}", env.steps())));
    }
    let nx = x_grid.len();
    let origin = x_grid.origin()[0];
    let dx = x_grid.spacing()[0];
    let bandwidths: Vec<T> = target_steps
        .iter()
        .map(|&t| bandwidth.unwrap_or_else(|| default_bandwidth(dx, T::of_usize(t - source_step) * fine_dt)))
        .collect();
    let mut values = vec![T::zero(); target_steps.len() * z.len() * nx];
    let sd = fine_dt.sqrt();
    let weight = T::one() / T::of_usize(paths);
    let mut exits = 0usize;
    let mut pos = vec![T::zero(); paths];
    for (zi, &z0) in z.iter().enumerate() {
        let mut rng = stream(seed, &[Label::Str("pw"), Label::Int(source_step as u64), Label::Int(zi as u64)]);
        pos.iter_mut().for_each(|p| *p = z0);
        let mut exited = vec![false; paths];
        let mut step = source_step;
        for (ti, &target) in target_steps.iter().enumerate() {
            while step < target {
                for (p, gone) in pos.iter_mut().zip(exited.iter_mut()) {
                    let (w, inside) = env.w_integral(step, *p);
                    *gone |= !inside;
                    *p += sd * standard_normal::<T, _>(&mut rng) + w;
                }
                step += 1;
            }
            let start = (ti * z.len() + zi) * nx;
            let out = &mut values[start..start + nx];
            for &p in &pos {
                splat(out, origin, dx, p, bandwidths[ti], weight);
            }
        }
        exits += exited.iter().filter(|&&e| e).count();
    }
    let times = |s: usize| T::of_usize(s) * fine_dt;
    Ok(ConditionalDensity {
        source_step,
        source_time: times(source_step),
        z: z.to_vec(),
        target_steps: target_steps.to_vec(),
        target_times: target_steps.iter().map(|&s| times(s)).collect(),
        x_grid: x_grid.clone(),
        values,
        paths: paths * z.len(),
        exits,
        bandwidths,
    })
}

/// Gaussian noise white in time with spatial covariance `kappa` at fixed points.
#[derive(Debug, Clone, PartialEq)]
pub struct ColoredNoise<T> {
    pub points: Vec<T>,
    pub dim: usize,
    pub dt: T,
    /// Laid out `[step][point]`.
    pub increments: Vec<T>,
}

impl<T: Real> ColoredNoise<T> {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.len().max(1)
    }

    pub fn step(&self, s: usize) -> &[T] {
        let m = self.len();
        &self.increments[s * m..(s + 1) * m]
    }
}

/// `steps` independent draws with covariance `dt * kappa(x_i, x_j)`.
pub fn sample_colored_noise<T: Real, R: Rng + ?Sized>(
    kappa: &CorrelationKernel<T>,
    points: &[T],
    dim: usize,
    dt: T,
    steps: usize,
    rng: &mut R,
) -> Result<ColoredNoise<T>> {
    if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
        return Err(Error::InvalidArgument("colored noise needs at least one point".into()));
    }
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument("colored noise time step must be positive".into()));
    }
    let m = points.len() / dim;
    let mut increments = vec![T::zero(); steps * m];
    if !kappa.is_zero() {
        let factor = GaussianFactor::new(&kappa.gram(points, dim))?;
        let sd = dt.sqrt();
        for chunk in increments.chunks_exact_mut(m) {
            factor.sample_into(rng, chunk);
            chunk.iter_mut().for_each(|v| *v *= sd);
        }
    }
    Ok(ColoredNoise { points: points.to_vec(), dim, dt, increments })
}

/// Conditional densities from every coarse source time `t_i`, `i < K`, to
/// every later coarse time, for source points on the strided x-grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable<T> {
    cfg: MildConfig<T>,
    x_grid: Grid<T>,
    z_index: Vec<usize>,
    sources: Vec<ConditionalDensity<T>>,
}

impl<T: Real> TransitionTable<T> {
    pub fn estimate(env: &FrozenEnvironment<T>, x_grid: &Grid<T>, cfg: &MildConfig<T>, seed: u64) -> Result<Self> {
        require_line(x_grid)?;
        cfg.validate()?;
        if env.steps() != cfg.fine_steps() {
            return Err(Error::DimensionMismatch("environment and config step counts differ".into()));
        }
        let z_index: Vec<usize> = (0..x_grid.len()).step_by(cfg.z_stride).collect();
        let z: Vec<T> = z_index.iter().map(|&i| x_grid.coord(0, i)).collect();
        let mut sources = Vec::with_capacity(cfg.coarse_steps);
        let mut exits = 0;
        let mut paths = 0;
        for i in 0..cfg.coarse_steps {
            let targets: Vec<usize> = (i + 1..=cfg.coarse_steps).map(|j| j * cfg.substeps).collect();
            let cd = estimate_conditional_density(
                env,
                cfg.fine_dt(),
                i * cfg.substeps,
                &z,
                &targets,
                x_grid,
                cfg.paths,
                cfg.bandwidth,
                seed,
            )?;
            exits += cd.exits;
            paths += cd.paths;
            sources.push(cd);
        }
        if T::of_usize(exits) > cfg.max_exit_rate * T::of_usize(paths) {
            return Err(Error::DomainExit { exits, paths });
        }
        Ok(Self { cfg: cfg.clone(), x_grid: x_grid.clone(), z_index, sources })
    }

    pub fn config(&self) -> &MildConfig<T> {
        &self.cfg
    }

    pub fn x_grid(&self) -> &Grid<T> {
        &self.x_grid
    }

    /// Indices into the x-grid of the source points.
    pub fn z_index(&self) -> &[usize] {
        &self.z_index
    }

    pub fn z(&self) -> Vec<T> {
        self.z_index.iter().map(|&i| self.x_grid.coord(0, i)).collect()
    }

    /// `p^W(t_i, z; t_j, .)` for `i < j`.
    pub fn density(&self, i: usize, j: usize, zi: usize) -> &[T] {
        self.sources[i].slice(j - i - 1, zi)
    }

    pub fn source(&self, i: usize) -> &ConditionalDensity<T> {
        &self.sources[i]
    }

    pub fn exits(&self) -> usize {
        self.sources.iter().map(|s| s.exits).sum()
    }
}

/// `u(t_j, x)` on the coarse time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MildSolution<T> {
    pub x_grid: Grid<T>,
    pub times: Vec<T>,
    /// Laid out `[time][x]`.
    pub values: Vec<T>,
    /// `d*_k = sup_{j,x} |u^k - u^{k-1}|^2`, `k = 1..K`.
    pub diffs: Vec<T>,
}

impl<T: Real> MildSolution<T> {
    pub fn at(&self, j: usize) -> &[T] {
        let nx = self.x_grid.len();
        &self.values[j * nx..(j + 1) * nx]
    }

    pub fn terminal(&self) -> GridField<T> {
        let j = self.times.len() - 1;
        GridField { grid: self.x_grid.clone(), values: self.at(j).to_vec(), time: self.times[j] }
    }

    /// Successive ratios `d*_{k+1} / d*_k`.
    pub fn ratios(&self) -> Vec<T> {
        self.diffs.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

struct MildInputs<'a, T> {
    table: &'a TransitionTable<T>,
    noise: &'a ColoredNoise<T>,
    mu: &'a [T],
    dz: T,
}

impl<T: Real> MildInputs<'_, T> {
    fn new<'a>(mu: &'a GridField<T>, table: &'a TransitionTable<T>, noise: &'a ColoredNoise<T>) -> Result<MildInputs<'a, T>> {
        if mu.grid != table.x_grid {
            return Err(Error::DimensionMismatch("initial density and transition table grids differ".into()));
        }
        if noise.len() != table.z_index.len() || noise.steps() < table.cfg.coarse_steps {
            return Err(Error::DimensionMismatch("colored noise does not cover the source points".into()));
        }
        let dz = T::of_usize(table.cfg.z_stride) * table.x_grid.spacing()[0];
        Ok(MildInputs { table, noise, mu: &mu.values, dz })
    }

    /// `int mu(z) p^W(0, z; t_j, x) dz` for `j = 0..=K` (`j = 0` is `mu`).
    fn deterministic(&self) -> Vec<Vec<T>> {
        let k = self.table.cfg.coarse_steps;
        let mut out = vec![self.mu.to_vec()];
        for j in 1..=k {
            let mut v = vec![T::zero(); self.mu.len()];
            for (zi, &xi) in self.table.z_index.iter().enumerate() {
                let w = self.mu[xi] * self.dz;
                if w != T::zero() {
                    for (o, &p) in v.iter_mut().zip(self.table.density(0, j, zi)) {
                        *o += w * p;
                    }
                }
            }
            out.push(v);
        }
        out
    }

    /// Adds `sum_z p^W(t_i, z; t_j, .) u(t_i, z) dV_i(z) dz` to `out`.
    fn add_noise_term(&self, i: usize, j: usize, u_i: &[T], out: &mut [T]) {
        let dv = self.noise.step(i);
        for (zi, &xi) in self.table.z_index.iter().enumerate() {
            let w = u_i[xi] * dv[zi] * self.dz;
            if w != T::zero() {
                for (o, &p) in out.iter_mut().zip(self.table.density(i, j, zi)) {
                    *o += w * p;
                }
            }
        }
    }
}

/// `K` Picard iterations from `u^0 = mu`; one colored-noise realization is
/// shared by every iteration.
pub fn picard_solve<T: Real>(
    mu: &GridField<T>,
    table: &TransitionTable<T>,
    noise: &ColoredNoise<T>,
    iterations: usize,
) -> Result<MildSolution<T>> {
    let inputs = MildInputs::new(mu, table, noise)?;
    let k_t = table.cfg.coarse_steps;
    let nx = mu.values.len();
    let base = inputs.deterministic();
    let mut prev: Vec<Vec<T>> = vec![mu.values.clone(); k_t + 1];
    let mut diffs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut next = base.clone();
        for j in 1..=k_t {
            for i in 0..j {
                inputs.add_noise_term(i, j, &prev[i], &mut next[j]);
            }
        }
        let mut sup = T::zero();
        for (a, b) in next.iter().zip(&prev) {
            for (x, y) in a.iter().zip(b) {
                sup = sup.max((*x - *y) * (*x - *y));
            }
        }
        if next.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Picard iterate"));
        }
        diffs.push(sup);
        prev = next;
    }
    if iterations >= 4 {
        let (a, b) = (diffs[iterations - 2], diffs[iterations - 1]);
        if a > T::zero() && b >= a {
            return Err(Error::NoContraction { ratio: (b / a).as_f64() });
        }
    }
    let times = (0..=k_t).map(|j| T::of_usize(j) * table.cfg.coarse_dt()).collect();
    let values = prev.into_iter().flatten().collect::<Vec<T>>();
    debug_assert_eq!(values.len(), (k_t + 1) * nx);
    Ok(MildSolution { x_grid: mu.grid.clone(), times, values, diffs })
}

/// Fixed point of the discrete mild equation by forward marching; equals
/// [`picard_solve`] with at least `coarse_steps` iterations.
pub fn march_solve<T: Real>(mu: &GridField<T>, table: &TransitionTable<T>, noise: &ColoredNoise<T>) -> Result<MildSolution<T>> {
    let inputs = MildInputs::new(mu, table, noise)?;
    let k_t = table.cfg.coarse_steps;
    let mut u = inputs.deterministic();
    for j in 1..=k_t {
        let (done, rest) = u.split_at_mut(j);
        for (i, u_i) in done.iter().enumerate() {
            inputs.add_noise_term(i, j, u_i, &mut rest[0]);
        }
    }
    if u.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mild solution"));
    }
    let times = (0..=k_t).map(|j| T::of_usize(j) * table.cfg.coarse_dt()).collect();
    Ok(MildSolution { x_grid: mu.grid.clone(), times, values: u.into_iter().flatten().collect(), diffs: Vec::new() })
}

/// One `(W, V)` realization with its conditional densities.
///
/// The environment, the conditional paths and the colored noise use the
/// unrelated streams `(seed, "env", r)`, `(seed, "pw", r)` and
/// `(seed, "colored-noise", r)`, so `p^W` never sees `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct MildReplica<T> {
    pub env: FrozenEnvironment<T>,
    pub table: TransitionTable<T>,
    pub noise: ColoredNoise<T>,
}

impl<T: Real> MildReplica<T> {
    pub fn sample(
        h: &MatrixKernel<T>,
        kappa: &CorrelationKernel<T>,
        x_grid: &Grid<T>,
        cfg: &MildConfig<T>,
        seed: u64,
        replica: u64,
    ) -> Result<Self> {
        let env_seed = crate::seed::derive_seed(seed, &[Label::Str("env"), Label::Int(replica)]);
        let env = FrozenEnvironment::sample(h, x_grid, cfg, env_seed)?;
        let pw_seed = crate::seed::derive_seed(seed, &[Label::Str("pw"), Label::Int(replica)]);
        let table = TransitionTable::estimate(&env, x_grid, cfg, pw_seed)?;
        let mut rng = stream(seed, &[Label::Str("colored-noise"), Label::Int(replica)]);
        let noise = sample_colored_noise(kappa, &table.z(), 1, cfg.coarse_dt(), cfg.coarse_steps, &mut rng)?;
        Ok(Self { env, table, noise })
    }

    pub fn picard(&self, mu: &GridField<T>, iterations: usize) -> Result<MildSolution<T>> {
        picard_solve(mu, &self.table, &self.noise, iterations)
    }

    pub fn march(&self, mu: &GridField<T>) -> Result<MildSolution<T>> {
        march_solve(mu, &self.table, &self.noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Profile;
    use crate::measures::heat_kernel;
    use crate::seed::substream;

    fn box_h() -> MatrixKernel<f64> {
        MatrixKernel::isotropic(1, Profile::Box { width: 1.0 }, 1.0).unwrap()
    }

    fn small_cfg() -> MildConfig<f64> {
        let mut cfg = MildConfig::new(0.25);
        cfg.coarse_steps = 8;
        cfg.substeps = 2;
        cfg.paths = 1000;
        cfg.z_stride = 2;
        cfg
    }

    #[test]
    fn splat_matches_direct_gaussian() {
        let mut out = vec![0.0; 101];
        splat(&mut out, -2.0, 0.04, 0.123, 0.05, 0.7);
        for (k, &v) in out.iter().enumerate() {
            let x = -2.0 + 0.04 * k as f64;
            let exact = 0.7 * heat_kernel(0.05, &[x - 0.123]);
            assert!((v - exact).abs() < 1e-12 * exact.max(1.0), "{k}: {v} vs {exact}");
        }
    }

    #[test]
    fn zero_kernel_gives_the_heat_kernel() {
        let h = MatrixKernel::<f64>::zero(1);
        let x_grid = Grid::line(-3.0, 3.0, 121).unwrap();
        let cfg = small_cfg();
        let env = FrozenEnvironment::sample(&h, &x_grid, &cfg, 1).unwrap();
        let cd = estimate_conditional_density(&env, cfg.fine_dt(), 0, &[0.0], &[16], &x_grid, 20_000, None, 2).unwrap();
        let elapsed = 0.25;
        let eps = cd.bandwidths[0];
        let mut err: f64 = 0.0;
        for (k, &v) in cd.slice(0, 0).iter().enumerate() {
            let exact = heat_kernel(elapsed + eps, &[x_grid.coord(0, k)]);
            err = err.max((v - exact).abs());
        }
        assert!(err < 0.03, "{err}");
        assert!((cd.mass(0, 0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_environment_reproduces_paths() {
        let h = box_h();
        let x_grid = Grid::line(-2.0, 2.0, 41).unwrap();
        let cfg = small_cfg();
        let env = FrozenEnvironment::sample(&h, &x_grid, &cfg, 3).unwrap();
        let a = estimate_conditional_density(&env, cfg.fine_dt(), 2, &[0.0, 0.5], &[4, 16], &x_grid, 200, None, 4).unwrap();
        let b = estimate_conditional_density(&env, cfg.fine_dt(), 2, &[0.0, 0.5], &[4, 16], &x_grid, 200, None, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|&v| v >= 0.0));
        assert_eq!(a.exits, 0);
    }

    #[test]
    fn environment_spacing_and_padding() {
        let h = box_h();
        let x_grid = Grid::line(-2.0, 2.0, 41).unwrap();
        let env = FrozenEnvironment::sample(&h, &x_grid, &small_cfg(), 3).unwrap();
        let grid = env.noise().grid();
        assert!(grid.spacing()[0] <= 1.0 / 8.0 + 1e-15);
        assert!(grid.origin()[0] <= -6.0 + grid.spacing()[0]);
        assert!(grid.coord(0, grid.len() - 1) >= 6.0 - grid.spacing()[0]);
    }

    #[test]
    fn environment_round_trips_through_files() {
        let h = box_h();
        let x_grid = Grid::line(-1.0, 1.0, 21).unwrap();
        let env = FrozenEnvironment::sample(&h, &x_grid, &small_cfg(), 5).unwrap();
        let dir = std::env::temp_dir().join(format!("superenv-env-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("env");
        env.save(&stem).unwrap();
        let back = FrozenEnvironment::load(&h, &stem).unwrap();
        assert_eq!(env, back);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn exits_are_counted() {
        let h = box_h();
        let x_grid = Grid::line(-1.0, 1.0, 21).unwrap();
        let mut cfg = small_cfg();
        cfg.padding_radii = 0.0;
        let env = FrozenEnvironment::sample(&h, &x_grid, &cfg, 6).unwrap();
        let cd = estimate_conditional_density(&env, cfg.fine_dt(), 0, &[1.0], &[16], &x_grid, 100, None, 7).unwrap();
        assert_eq!(cd.exits, 100);
        assert!(matches!(TransitionTable::estimate(&env, &x_grid, &cfg, 8), Err(Error::DomainExit { .. })));
    }

    #[test]
    fn colored_noise_special_cases() {
        let pts = [0.0, 0.5, 1.0];
        let mut rng = substream(9, "v", 0);
        let zero = sample_colored_noise(&CorrelationKernel::zero(), &pts, 1, 0.1, 5, &mut rng).unwrap();
        assert!(zero.increments.iter().all(|&v| v == 0.0));
        let one = sample_colored_noise(&CorrelationKernel::constant(1.0).unwrap(), &pts, 1, 0.1, 5, &mut rng).unwrap();
        for s in 0..5 {
            let step = one.step(s);
            assert!(step.iter().all(|&v| v == step[0]));
        }
    }

    #[test]
    fn colored_noise_correlation() {
        let kappa = CorrelationKernel::gauss(1.0, 1.0, 4.0).unwrap();
        let pts = [0.0, 0.25];
        let mut rng = substream(10, "v", 0);
        let noise = sample_colored_noise(&kappa, &pts, 1, 0.01, 100_000, &mut rng).unwrap();
        let (mut a, mut b, mut ab) = (0.0f64, 0.0f64, 0.0f64);
        for s in 0..noise.steps() {
            let v = noise.step(s);
            a += v[0] * v[0];
            b += v[1] * v[1];
            ab += v[0] * v[1];
        }
        let corr = ab / (a * b).sqrt();
        let oracle = kappa.eval(&[0.0], &[0.25]) / (kappa.eval(&[0.0], &[0.0]) * kappa.eval(&[0.25], &[0.25])).sqrt();
        assert!((corr - oracle).abs() < 0.01, "{corr} vs {oracle}");
    }

    fn solve_setup(kappa: CorrelationKernel<f64>, seed: u64) -> (GridField<f64>, TransitionTable<f64>, ColoredNoise<f64>) {
        let h = box_h();
        let x_grid = Grid::line(-2.0, 2.0, 33).unwrap();
        let mut cfg = small_cfg();
        cfg.paths = 300;
        let env = FrozenEnvironment::sample(&h, &x_grid, &cfg, seed).unwrap();
        let table = TransitionTable::estimate(&env, &x_grid, &cfg, seed + 1).unwrap();
        let z = table.z();
        let noise = sample_colored_noise(&kappa, &z, 1, cfg.coarse_dt(), cfg.coarse_steps, &mut substream(seed, "v", 0)).unwrap();
        let mu = GridField::from_fn(x_grid, |x| heat_kernel(0.25, x));
        (mu, table, noise)
    }

    #[test]
    fn zero_kappa_converges_after_one_iteration() {
        let (mu, table, noise) = solve_setup(CorrelationKernel::zero(), 11);
        let sol = picard_solve(&mu, &table, &noise, 4).unwrap();
        assert!(sol.diffs[0] > 0.0);
        assert!(sol.diffs[1..].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn march_equals_converged_picard() {
        let (mu, table, noise) = solve_setup(CorrelationKernel::gauss(2.0, 1.0, 4.0).unwrap(), 12);
        let k_t = table.config().coarse_steps;
        let picard = picard_solve(&mu, &table, &noise, k_t + 2).unwrap();
        let march = march_solve(&mu, &table, &noise).unwrap();
        assert_eq!(picard.diffs[k_t], 0.0);
        for (a, b) in picard.values.iter().zip(&march.values) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn picard_differences_decay() {
        let (mu, table, noise) = solve_setup(CorrelationKernel::gauss(2.0, 1.0, 4.0).unwrap(), 13);
        let sol = picard_solve(&mu, &table, &noise, 5).unwrap();
        assert!(sol.diffs[4] < sol.diffs[0]);
        assert!(sol.values.iter().all(|v| v.is_finite()));
    }
}
