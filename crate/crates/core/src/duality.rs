//! Moment oracle for the limiting superprocess.
//!
//! `E X_t^{(n)}(f) = X_0^{(n)}(v_t)` where `v` solves
//! `dv/dt = A^(n) v + sum_{i<j} kappa(x_i, x_j) v` on `R^{nd}`. The PDE is
//! solved by explicit finite differences on a truncated box with zero
//! Dirichlet data outside. The same quantity is estimated by the dual jump
//! process: pure semigroup flow interrupted at rate `n(n-1)/2` by
//! multiplication with `kappa`, reweighted by `exp(n(n-1)t/2)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField};
use crate::kernels::{CorrelationKernel, RhoKernel};
use crate::particles::EmpiricalMeasure;
use crate::scalar::{compensated_sum, uniform01, Estimate, Real};
use crate::seed::substream;

/// Minimum number of nodes along every axis.
pub const MIN_AXIS_NODES: usize = 5;

/// Generator of `n` particles moving in a shared environment:
/// `A f = 1/2 sum_{k1,k2} sum_{ij} (delta_{k1k2} delta_ij + rho^ij(x_k1 - x_k2)) d^2 f / dx^i_k1 dx^j_k2`.
#[derive(Debug, Clone)]
pub struct NParticleGenerator<T> {
    n: usize,
    rho: RhoKernel<T>,
}

impl<T: Real> NParticleGenerator<T> {
    pub fn new(n: usize, rho: RhoKernel<T>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("need at least one dual particle".into()));
        }
        Ok(Self { n, rho })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.rho.dim()
    }

    pub fn rho(&self) -> &RhoKernel<T> {
        &self.rho
    }

    /// `lambda_n = n(n-1)/2`.
    pub fn clock_rate(&self) -> T {
        T::of_usize(self.n * (self.n - 1)) * T::half()
    }

    /// Largest explicit Euler step `h^2 / (2 n d (1 + ||rho(0)||_HS))` on `grid`.
    pub fn stability_bound(&self, grid: &Grid<T>) -> T {
        let h = grid.min_spacing();
        let hs = self.rho.rho0().iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        h * h / (T::two() * T::of_usize(self.n * self.dim()) * (T::one() + hs))
    }

    fn check_grid(&self, grid: &Grid<T>) -> Result<()> {
        let nd = self.n * self.dim();
        if grid.dim() != nd {
            return Err(Error::DimensionMismatch(format!("grid of dimension {} for n*d = {nd}", grid.dim())));
        }
        if let Some(&nodes) = grid.shape().iter().find(|&&s| s < MIN_AXIS_NODES) {
            return Err(Error::GridTooSmall(format!("{nodes} nodes on an axis, need at least {MIN_AXIS_NODES}")));
        }
        Ok(())
    }

    /// Finite-difference discretization of the generator on `grid`.
    pub fn stencil(&self, grid: &Grid<T>) -> Result<Stencil<T>> {
        self.check_grid(grid)?;
        let d = self.dim();
        let nd = self.n * d;
        let h = grid.spacing();
        let rho0 = self.rho.rho0();
        let mut terms = Vec::new();
        let nodes = grid.len();
        let mut x = vec![T::zero(); nd];
        let mut diff = vec![T::zero(); d];
        let mut r = vec![T::zero(); d * d];
        for a in 0..nd {
            for b in a..nd {
                let (k1, i) = (a / d, a % d);
                let (k2, j) = (b / d, b % d);
                let scale = if a == b { T::half() / (h[a] * h[a]) } else { T::half() / (T::lit(4.0) * h[a] * h[b]) };
                let coeff = if k1 == k2 {
                    // c_ab + c_ba for a != b, c_aa for a == b; both constant
                    let delta = if i == j { T::one() } else { T::zero() };
                    let c = if a == b { delta + rho0[i * d + j] } else { rho0[i * d + j] + rho0[j * d + i] };
                    Coeff::Const(c * scale)
                } else {
                    let values = (0..nodes)
                        .map(|p| {
                            grid.node_into(p, &mut x);
                            for e in 0..d {
                                diff[e] = x[k1 * d + e] - x[k2 * d + e];
                            }
                            self.rho.eval_into(&diff, &mut r);
                            let forward = r[i * d + j];
                            for e in 0..d {
                                diff[e] = -diff[e];
                            }
                            self.rho.eval_into(&diff, &mut r);
                            (forward + r[j * d + i]) * scale
                        })
                        .collect();
                    Coeff::Field(values)
                };
                if !coeff.is_zero() {
                    terms.push(Term { a, b, coeff });
                }
            }
        }
        Ok(Stencil { shape: grid.shape().to_vec(), strides: grid.strides(), len: nodes, terms })
    }
}

#[derive(Debug, Clone)]
enum Coeff<T> {
    Const(T),
    Field(Vec<T>),
}

impl<T: Real> Coeff<T> {
    #[inline]
    fn at(&self, p: usize) -> T {
        match self {
            Coeff::Const(c) => *c,
            Coeff::Field(v) => v[p],
        }
    }

    fn is_zero(&self) -> bool {
        match self {
            Coeff::Const(c) => *c == T::zero(),
            Coeff::Field(v) => v.iter().all(|&c| c == T::zero()),
        }
    }
}

#[derive(Debug, Clone)]
struct Term<T> {
    a: usize,
    b: usize,
    coeff: Coeff<T>,
}

const CORNERS: [(isize, isize, bool); 4] = [(1, 1, true), (1, -1, false), (-1, 1, false), (-1, -1, true)];

/// Three-point second differences and four-point cross differences with zero
/// values beyond the grid.
#[derive(Debug, Clone)]
pub struct Stencil<T> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
    terms: Vec<Term<T>>,
}

impl<T: Real> Stencil<T> {
    #[inline]
    fn neighbor(&self, p: usize, idx: &[usize], a: usize, step: isize) -> Option<usize> {
        if step > 0 {
            (idx[a] + 1 < self.shape[a]).then(|| p + self.strides[a])
        } else {
            (idx[a] > 0).then(|| p - self.strides[a])
        }
    }

    #[inline]
    fn corner(&self, p: usize, idx: &[usize], a: usize, b: usize, sa: isize, sb: isize) -> Option<usize> {
        let q = self.neighbor(p, idx, a, sa)?;
        let q_idx_ok = if sb > 0 { idx[b] + 1 < self.shape[b] } else { idx[b] > 0 };
        q_idx_ok.then(|| if sb > 0 { q + self.strides[b] } else { q - self.strides[b] })
    }

    fn advance(&self, idx: &mut [usize]) {
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < self.shape[a] {
                return;
            }
            idx[a] = 0;
        }
    }

    /// `out = L v`.
    pub fn apply(&self, v: &[T], out: &mut [T]) {
        let mut idx = vec![0usize; self.shape.len()];
        for p in 0..self.len {
            let mut acc = T::zero();
            for term in &self.terms {
                let c = term.coeff.at(p);
                if c == T::zero() {
                    continue;
                }
                if term.a == term.b {
                    let vm = self.neighbor(p, &idx, term.a, -1).map_or(T::zero(), |q| v[q]);
                    let vp = self.neighbor(p, &idx, term.a, 1).map_or(T::zero(), |q| v[q]);
                    acc += c * (vp - T::two() * v[p] + vm);
                } else {
                    let mut s = T::zero();
                    for &(sa, sb, plus) in &CORNERS {
                        if let Some(q) = self.corner(p, &idx, term.a, term.b, sa, sb) {
                            s = if plus { s + v[q] } else { s - v[q] };
                        }
                    }
                    acc += c * s;
                }
            }
            out[p] = acc;
            self.advance(&mut idx);
        }
    }

    /// `out = L^T w`.
    pub fn apply_transpose(&self, w: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        let mut idx = vec![0usize; self.shape.len()];
        for p in 0..self.len {
            let wp = w[p];
            if wp != T::zero() {
                for term in &self.terms {
                    let c = term.coeff.at(p) * wp;
                    if c == T::zero() {
                        continue;
                    }
                    if term.a == term.b {
                        out[p] -= T::two() * c;
                        if let Some(q) = self.neighbor(p, &idx, term.a, -1) {
                            out[q] += c;
                        }
                        if let Some(q) = self.neighbor(p, &idx, term.a, 1) {
                            out[q] += c;
                        }
                    } else {
                        for &(sa, sb, plus) in &CORNERS {
                            if let Some(q) = self.corner(p, &idx, term.a, term.b, sa, sb) {
                                out[q] = if plus { out[q] + c } else { out[q] - c };
                            }
                        }
                    }
                }
            }
            self.advance(&mut idx);
        }
    }
}

/// `A^(n) v` on the grid of `v`.
pub fn apply_generator<T: Real>(v: &GridField<T>, gen: &NParticleGenerator<T>) -> Result<GridField<T>> {
    let stencil = gen.stencil(&v.grid)?;
    let mut out = vec![T::zero(); v.values.len()];
    stencil.apply(&v.values, &mut out);
    GridField::new(v.grid.clone(), out, v.time)
}

/// `sum_{i<j} kappa(x_i, x_j)` at every node of the `n d`-dimensional grid.
pub fn pair_potential<T: Real>(kappa: &CorrelationKernel<T>, grid: &Grid<T>, n: usize, d: usize) -> Vec<T> {
    let mut x = vec![T::zero(); n * d];
    (0..grid.len())
        .map(|p| {
            grid.node_into(p, &mut x);
            let mut q = T::zero();
            for i in 0..n {
                for j in i + 1..n {
                    q += kappa.eval(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                }
            }
            q
        })
        .collect()
}

/// Explicit Euler propagator `v <- v + dt (L v + q v)`.
#[derive(Debug, Clone)]
pub struct MomentSolver<T> {
    grid: Grid<T>,
    stencil: Stencil<T>,
    potential: Option<Vec<T>>,
    dt: T,
}

impl<T: Real> MomentSolver<T> {
    /// `kappa = None` gives the pure semigroup `T^(n)`.
    pub fn new(gen: &NParticleGenerator<T>, grid: &Grid<T>, kappa: Option<&CorrelationKernel<T>>, dt: T) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidArgument("time step must be positive".into()));
        }
        let stencil = gen.stencil(grid)?;
        let bound = gen.stability_bound(grid);
        if dt > bound * (T::one() + T::lit(1e-12)) {
            return Err(Error::Stability { dt: dt.as_f64(), bound: bound.as_f64() });
        }
        let potential = kappa.filter(|k| !k.is_zero()).map(|k| pair_potential(k, grid, gen.n(), gen.dim()));
        Ok(Self { grid: grid.clone(), stencil, potential, dt })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.grid
    }

    /// Advances `v` by `steps` Euler steps.
    pub fn evolve(&self, v: &mut [T], steps: usize, scratch: &mut Vec<T>) {
        scratch.resize(v.len(), T::zero());
        for _ in 0..steps {
            self.stencil.apply(v, scratch);
            match &self.potential {
                Some(q) => {
                    for p in 0..v.len() {
                        v[p] += self.dt * (scratch[p] + q[p] * v[p]);
                    }
                }
                None => {
                    for p in 0..v.len() {
                        v[p] += self.dt * scratch[p];
                    }
                }
            }
        }
    }

    /// Advances `w` by `steps` steps of the transposed propagator.
    pub fn evolve_adjoint(&self, w: &mut [T], steps: usize, scratch: &mut Vec<T>) {
        scratch.resize(w.len(), T::zero());
        for _ in 0..steps {
            self.stencil.apply_transpose(w, scratch);
            match &self.potential {
                Some(q) => {
                    for p in 0..w.len() {
                        w[p] += self.dt * (scratch[p] + q[p] * w[p]);
                    }
                }
                None => {
                    for p in 0..w.len() {
                        w[p] += self.dt * scratch[p];
                    }
                }
            }
        }
    }
}

/// `v_t` with `v_0 = f`, using `steps` explicit Euler steps.
pub fn solve_moment_pde<T: Real>(
    f: &GridField<T>,
    kappa: &CorrelationKernel<T>,
    gen: &NParticleGenerator<T>,
    t: T,
    steps: usize,
) -> Result<GridField<T>> {
    if steps == 0 || !(t >= T::zero()) {
        return Err(Error::InvalidArgument("need t >= 0 and at least one step".into()));
    }
    let dt = t / T::of_usize(steps);
    if t == T::zero() {
        return GridField::new(f.grid.clone(), f.values.clone(), f.time);
    }
    let solver = MomentSolver::new(gen, &f.grid, Some(kappa), dt)?;
    let mut v = f.values.clone();
    solver.evolve(&mut v, steps, &mut Vec::new());
    GridField::new(f.grid.clone(), v, f.time + t)
}

/// Quadrature weights `mu(x_1)...mu(x_n) dx` on `mu.grid^n`.
pub fn product_weights<T: Real>(mu: &GridField<T>, n: usize) -> (Grid<T>, Vec<T>) {
    let grid = mu.grid.power(n);
    let m = mu.values.len();
    let vol = grid.cell_volume();
    let weights = (0..grid.len())
        .map(|mut p| {
            let mut w = vol;
            for _ in 0..n {
                w *= mu.values[p % m];
                p /= m;
            }
            w
        })
        .collect();
    (grid, weights)
}

/// `X_0^{(n)}(v) = int v(x_1..x_n) mu(x_1)...mu(x_n) dx`.
pub fn moment_from_dual<T: Real>(mu: &GridField<T>, v: &GridField<T>, n: usize) -> Result<T> {
    if n == 0 || v.grid.dim() != n * mu.grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "field of dimension {} against {n} copies of a {}-dimensional density",
            v.grid.dim(),
            mu.grid.dim()
        )));
    }
    if mu.values.iter().any(|&m| m < T::zero()) {
        return Err(Error::InvalidArgument("initial density must be nonnegative".into()));
    }
    let (grid, weights) = product_weights(mu, n);
    if grid != v.grid {
        return Err(Error::DimensionMismatch("field grid is not the product of the density grid".into()));
    }
    Ok(compensated_sum(weights.iter().zip(&v.values).map(|(&w, &x)| w * x)))
}

/// `X^{(n)}(f) = n^{-n} sum over ordered n-tuples of atoms of f`.
pub fn product_pairing<T: Real>(mu: &EmpiricalMeasure<T>, n: usize, f: impl Fn(&[T]) -> T) -> T {
    let d = mu.dim();
    let m = mu.len();
    if m == 0 {
        return T::zero();
    }
    let mut point = vec![T::zero(); n * d];
    let mut idx = vec![0usize; n];
    let mut acc = Vec::with_capacity(m.pow(n as u32));
    loop {
        for (k, &i) in idx.iter().enumerate() {
            point[k * d..(k + 1) * d].copy_from_slice(mu.atom(i));
        }
        acc.push(f(&point));
        let mut k = n;
        loop {
            if k == 0 {
                return compensated_sum(acc) * mu.mass_per_atom().powi(n as i32);
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// A jump of the dual process: Euler step index and the particle pair it multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualJump {
    pub step: usize,
    pub pair: (usize, usize),
}

/// Dual jump estimator of `E X_t^{(n)}(f)` on a fixed grid and Euler step.
///
/// Forward fields `T^k f` and adjoint weights `(T^T)^k (mu x mu)` are cached
/// for every step, so replicas with at most one jump cost one inner product.
#[derive(Debug, Clone)]
pub struct JumpEstimator<T> {
    n: usize,
    steps: usize,
    t: T,
    rate: T,
    jump_cap: usize,
    solver: MomentSolver<T>,
    pairs: Vec<(usize, usize)>,
    /// `kappa(x_i, x_j)` on the grid, one field per pair.
    multipliers: Vec<Vec<T>>,
    forward: Vec<Vec<T>>,
    adjoint: Vec<Vec<T>>,
}

/// Default cap on jumps per replica.
pub const DEFAULT_JUMP_CAP: usize = 64;

impl<T: Real> JumpEstimator<T> {
    pub fn new(
        f: &GridField<T>,
        mu: &GridField<T>,
        kappa: &CorrelationKernel<T>,
        gen: &NParticleGenerator<T>,
        t: T,
        steps: usize,
        jump_cap: usize,
    ) -> Result<Self> {
        if steps == 0 || !(t > T::zero()) {
            return Err(Error::InvalidArgument("need t > 0 and at least one step".into()));
        }
        let n = gen.n();
        let d = gen.dim();
        let (grid, weights) = product_weights(mu, n);
        if grid != f.grid {
            return Err(Error::DimensionMismatch("test function grid is not the product of the density grid".into()));
        }
        let solver = MomentSolver::new(gen, &grid, None, t / T::of_usize(steps))?;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
        let mut x = vec![T::zero(); n * d];
        let multipliers = pairs
            .iter()
            .map(|&(i, j)| {
                (0..grid.len())
                    .map(|p| {
                        grid.node_into(p, &mut x);
                        kappa.eval(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d])
                    })
                    .collect()
            })
            .collect();
        let mut scratch = Vec::new();
        let mut forward = Vec::with_capacity(steps + 1);
        let mut v = f.values.clone();
        forward.push(v.clone());
        let mut adjoint = Vec::with_capacity(steps + 1);
        let mut w = weights;
        adjoint.push(w.clone());
        for _ in 0..steps {
            solver.evolve(&mut v, 1, &mut scratch);
            forward.push(v.clone());
            solver.evolve_adjoint(&mut w, 1, &mut scratch);
            adjoint.push(w.clone());
        }
        Ok(Self { n, steps, t, rate: gen.clock_rate(), jump_cap, solver, pairs, multipliers, forward, adjoint })
    }

    pub fn clock_rate(&self) -> T {
        self.rate
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Exponential clock of rate `lambda_n` on `[0, t)`, jump times rounded to the Euler grid.
    pub fn sample_jumps<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<DualJump>> {
        let mut jumps = Vec::new();
        if self.rate == T::zero() {
            return Ok(jumps);
        }
        let dt = self.solver.dt();
        let mut clock = T::zero();
        loop {
            let u: T = uniform01(rng);
            clock += -(T::one() - u).ln() / self.rate;
            if clock >= self.t {
                return Ok(jumps);
            }
            if jumps.len() == self.jump_cap {
                return Err(Error::RunawayJumps { count: jumps.len() + 1, cap: self.jump_cap });
            }
            let step = (clock / dt).round().to_usize().unwrap_or(self.steps).min(self.steps);
            let pair = if self.pairs.len() == 1 {
                self.pairs[0]
            } else {
                self.pairs[rng.random_range(0..self.pairs.len())]
            };
            jumps.push(DualJump { step, pair });
        }
    }

    fn multiplier(&self, pair: (usize, usize)) -> &[T] {
        let k = self.pairs.iter().position(|&p| p == pair).expect("known pair");
        &self.multipliers[k]
    }

    /// `<mu^n, Y_t>` for the given jumps, from the cached fields.
    pub fn pairing(&self, jumps: &[DualJump]) -> T {
        let dot = |a: &[T], b: &[T]| compensated_sum(a.iter().zip(b).map(|(&x, &y)| x * y));
        match jumps {
            [] => dot(&self.adjoint[0], &self.forward[self.steps]),
            [first, rest @ ..] => {
                let q = self.multiplier(first.pair);
                let mut v: Vec<T> = self.forward[first.step].iter().zip(q).map(|(&a, &b)| a * b).collect();
                let mut at = first.step;
                let mut scratch = Vec::new();
                for jump in rest {
                    self.solver.evolve(&mut v, jump.step - at, &mut scratch);
                    for (a, &b) in v.iter_mut().zip(self.multiplier(jump.pair)) {
                        *a *= b;
                    }
                    at = jump.step;
                }
                dot(&self.adjoint[self.steps - at], &v)
            }
        }
    }

    /// `<mu^n, Y_t>` evolving the field through every step.
    pub fn pairing_direct(&self, jumps: &[DualJump]) -> T {
        let mut v = self.forward[0].clone();
        let mut at = 0;
        let mut scratch = Vec::new();
        for jump in jumps {
            self.solver.evolve(&mut v, jump.step - at, &mut scratch);
            for (a, &b) in v.iter_mut().zip(self.multiplier(jump.pair)) {
                *a *= b;
            }
            at = jump.step;
        }
        self.solver.evolve(&mut v, self.steps - at, &mut scratch);
        compensated_sum(self.adjoint[0].iter().zip(&v).map(|(&x, &y)| x * y))
    }

    /// `exp(lambda_n t) <mu^n, Y_t>` for one replica.
    pub fn replica_value<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<T> {
        let jumps = self.sample_jumps(rng)?;
        Ok((self.rate * self.t).exp() * self.pairing(&jumps))
    }

    /// Sequential average over replicas `0..replicas` of stream `(seed, "dual-jump", r)`.
    pub fn estimate(&self, seed: u64, replicas: usize) -> Result<Estimate<T>> {
        if replicas == 0 {
            return Err(Error::InvalidArgument("need at least one replica".into()));
        }
        let values = (0..replicas)
            .map(|r| self.replica_value(&mut substream(seed, "dual-jump", r as u64)))
            .collect::<Result<Vec<T>>>()?;
        Ok(Estimate::from_samples(&values))
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Forward Monte Carlo vs dual comparison for one test function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n: usize,
    pub t: f64,
    #[serde(rename = "f-id")]
    pub f_id: String,
    pub mc_value: f64,
    pub mc_se: f64,
    pub pde_value: f64,
    pub jump_value: Option<f64>,
    pub jump_se: Option<f64>,
    /// `|mc - pde| / |pde|`.
    pub rel_dev: f64,
    /// Set when the correlation kernel is a constant.
    pub test_mode: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_rho, default_quad_step, MatrixKernel, Profile};
    use crate::measures::heat_kernel;
    use proptest::prelude::*;

    fn box_rho() -> RhoKernel<f64> {
        let h = MatrixKernel::isotropic(1, Profile::Box { width: 1.0 }, 1.0).unwrap();
        build_rho(&h, default_quad_step(&h)).unwrap()
    }

    fn interior(grid: &Grid<f64>, p: usize, margin: usize) -> bool {
        grid.unravel(p).iter().zip(grid.shape()).all(|(&i, &s)| i >= margin && i + margin < s)
    }

    #[test]
    fn constants_are_annihilated() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let grid = Grid::cube(2, -2.0, 2.0, 21).unwrap();
        let v = GridField::from_fn(grid.clone(), |_| 3.0);
        let av = apply_generator(&v, &gen).unwrap();
        for p in 0..grid.len() {
            if interior(&grid, p, 1) {
                assert!(av.values[p].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_gives_one_plus_rho0() {
        let gen = NParticleGenerator::new(1, box_rho()).unwrap();
        let grid = Grid::line(-2.0, 2.0, 41).unwrap();
        let v = GridField::from_fn(grid.clone(), |x| x[0] * x[0]);
        let av = apply_generator(&v, &gen).unwrap();
        for p in 1..40 {
            assert!((av.values[p] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn product_picks_out_the_mixed_term() {
        let rho = box_rho();
        let gen = NParticleGenerator::new(2, rho.clone()).unwrap();
        let grid = Grid::cube(2, -2.0, 2.0, 41).unwrap();
        let v = GridField::from_fn(grid.clone(), |x| x[0] * x[1]);
        let av = apply_generator(&v, &gen).unwrap();
        for p in 0..grid.len() {
            if interior(&grid, p, 1) {
                let x = grid.node(p);
                let oracle = rho.eval(&[x[0] - x[1]])[0];
                assert!((av.values[p] - oracle).abs() < 1e-9, "{} vs {oracle}", av.values[p]);
            }
        }
    }

    #[test]
    fn stencil_converges_at_second_order() {
        let rho = box_rho();
        let gen = NParticleGenerator::new(2, rho.clone()).unwrap();
        let v = |x: &[f64]| (0.7 * x[0]).sin() * (0.5 * x[1]).cos();
        let exact = |x: &[f64]| {
            let (s0, c0) = (0.7 * x[0]).sin_cos();
            let (s1, c1) = (0.5 * x[1]).sin_cos();
            let v11 = -0.49 * s0 * c1;
            let v22 = -0.25 * s0 * c1;
            let v12 = -0.35 * c0 * s1;
            0.5 * 2.0 * (v11 + v22) + rho.eval(&[x[0] - x[1]])[0] * v12
        };
        let mut errors = Vec::new();
        for nodes in [21, 41, 81] {
            let grid = Grid::cube(2, -2.0, 2.0, nodes).unwrap();
            let av = apply_generator(&GridField::from_fn(grid.clone(), v), &gen).unwrap();
            let mut err: f64 = 0.0;
            for p in 0..grid.len() {
                if interior(&grid, p, 1) {
                    err = err.max((av.values[p] - exact(&grid.node(p))).abs());
                }
            }
            errors.push(err);
        }
        assert!(errors[0] / errors[1] >= 3.5 && errors[1] / errors[2] >= 3.5, "{errors:?}");
    }

    #[test]
    fn transpose_is_the_adjoint() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let grid = Grid::cube(2, -1.5, 1.5, 13).unwrap();
        let stencil = gen.stencil(&grid).unwrap();
        let v: Vec<f64> = (0..grid.len()).map(|p| ((p * 7919) % 101) as f64 / 101.0).collect();
        let w: Vec<f64> = (0..grid.len()).map(|p| ((p * 104729) % 97) as f64 / 97.0 - 0.5).collect();
        let mut lv = vec![0.0; grid.len()];
        let mut ltw = vec![0.0; grid.len()];
        stencil.apply(&v, &mut lv);
        stencil.apply_transpose(&w, &mut ltw);
        let a: f64 = w.iter().zip(&lv).map(|(x, y)| x * y).sum();
        let b: f64 = v.iter().zip(&ltw).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn small_grids_and_unstable_steps_are_refused() {
        let gen = NParticleGenerator::new(1, box_rho()).unwrap();
        let small = GridField::from_fn(Grid::line(-1.0, 1.0, 4).unwrap(), |_| 1.0);
        assert!(matches!(apply_generator(&small, &gen), Err(Error::GridTooSmall(_))));
        let grid = Grid::line(-4.0, 4.0, 81).unwrap();
        let f = GridField::from_fn(grid.clone(), |_| 1.0);
        let err = solve_moment_pde(&f, &CorrelationKernel::zero(), &gen, 1.0, 10).unwrap_err();
        match err {
            Error::Stability { bound, .. } => assert!((bound - 0.01 / 4.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heat_flow_preserves_constants_in_the_interior() {
        let gen = NParticleGenerator::new(1, box_rho()).unwrap();
        let grid = Grid::line(-6.0, 6.0, 121).unwrap();
        let f = GridField::from_fn(grid, |_| 1.0);
        let v = solve_moment_pde(&f, &CorrelationKernel::zero(), &gen, 0.25, 100).unwrap();
        assert!((v.values[60] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_kappa_reduces_to_exponential_growth() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let grid = Grid::cube(2, -4.5, 4.5, 91).unwrap();
        let f = GridField::from_fn(grid.clone(), |_| 1.0);
        let v = solve_moment_pde(&f, &CorrelationKernel::constant(1.0).unwrap(), &gen, 0.25, 200).unwrap();
        let center = grid.len() / 2;
        assert!((v.values[center] - 0.25f64.exp()).abs() < 1e-3);
        let mu = GridField::from_fn(Grid::line(-4.5, 4.5, 91).unwrap(), |x| heat_kernel(0.25, x));
        let m = moment_from_dual(&mu, &v, 2).unwrap();
        assert!((m - 1.28403).abs() < 2e-3, "{m}");
    }

    #[test]
    fn gaussian_variance_grows_by_two_t() {
        let gen = NParticleGenerator::new(1, box_rho()).unwrap();
        let grid = Grid::line(-6.0, 6.0, 241).unwrap();
        let f = GridField::from_fn(grid.clone(), |x| heat_kernel(0.3, x));
        let t = 0.25;
        let dt = gen.stability_bound(&grid);
        let steps = (t / dt).ceil() as usize;
        let v = solve_moment_pde(&f, &CorrelationKernel::zero(), &gen, t, steps).unwrap();
        let oracle = GridField::from_fn(grid, |x| heat_kernel(0.3 + 2.0 * t, x));
        let err = v.values.iter().zip(&oracle.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-3 * oracle.sup_abs(), "{err}");
    }

    #[test]
    fn unit_field_pairs_to_total_mass() {
        let mu = GridField::from_fn(Grid::line(-5.0, 5.0, 101).unwrap(), |x| heat_kernel(0.25, x));
        for n in 1..=2 {
            let v = GridField::from_fn(mu.grid.power(n), |_| 1.0);
            let m = moment_from_dual(&mu, &v, n).unwrap();
            assert!((m - 1.0f64).abs() < 1e-6, "{m}");
        }
        let wrong = GridField::from_fn(Grid::line(-5.0, 5.0, 101).unwrap(), |_| 1.0);
        assert!(moment_from_dual(&mu, &wrong, 2).is_err());
    }

    #[test]
    fn semigroup_property() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let grid = Grid::cube(2, -3.0, 3.0, 31).unwrap();
        let kappa = CorrelationKernel::gauss(1.0, 1.0, 4.0).unwrap();
        let f = GridField::from_fn(grid, |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp());
        let whole = solve_moment_pde(&f, &kappa, &gen, 0.2, 200).unwrap();
        let half = solve_moment_pde(&f, &kappa, &gen, 0.1, 100).unwrap();
        let split = solve_moment_pde(&half, &kappa, &gen, 0.1, 100).unwrap();
        assert!(whole.l2_distance(&split).unwrap() < 1e-12);
    }

    #[test]
    fn fast_path_matches_direct_evolution() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let axis = Grid::line(-3.0, 3.0, 31).unwrap();
        let grid = axis.power(2);
        let mu = GridField::from_fn(axis, |x| heat_kernel(0.25, x));
        let f = GridField::from_fn(grid, |x: &[f64]| 1.0 + 0.5 * (x[0] - x[1]).cos());
        let kappa = CorrelationKernel::gauss(1.0, 1.0, 4.0).unwrap();
        let est = JumpEstimator::new(&f, &mu, &kappa, &gen, 0.2, 40, DEFAULT_JUMP_CAP).unwrap();
        let cases: Vec<Vec<DualJump>> = vec![
            vec![],
            vec![DualJump { step: 0, pair: (0, 1) }],
            vec![DualJump { step: 17, pair: (0, 1) }],
            vec![DualJump { step: 40, pair: (0, 1) }],
            vec![DualJump { step: 3, pair: (0, 1) }, DualJump { step: 3, pair: (0, 1) }, DualJump { step: 29, pair: (0, 1) }],
        ];
        for jumps in cases {
            let a = est.pairing(&jumps);
            let b = est.pairing_direct(&jumps);
            assert!((a - b).abs() < 1e-10, "{jumps:?}: {a} vs {b}");
        }
    }

    #[test]
    fn zero_kappa_jump_estimator_is_the_semigroup() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let axis = Grid::line(-3.0, 3.0, 25).unwrap();
        let mu = GridField::from_fn(axis.clone(), |x| heat_kernel(0.25, x));
        let f = GridField::from_fn(axis.power(2), |_| 1.0);
        let zero = CorrelationKernel::zero();
        let est = JumpEstimator::new(&f, &mu, &zero, &gen, 0.25, 50, DEFAULT_JUMP_CAP).unwrap();
        let e = est.estimate(3, 2000).unwrap();
        let semigroup = moment_from_dual(&mu, &solve_moment_pde(&f, &zero, &gen, 0.25, 50).unwrap(), 2).unwrap();
        // replicas with no jump contribute exp(t) * semigroup, others zero
        assert!(e.z_score(semigroup) < 3.0, "{e:?} vs {semigroup}");
        let tiny = JumpEstimator::new(&f, &mu, &zero, &gen, 1e-6, 1, DEFAULT_JUMP_CAP).unwrap();
        let e0 = tiny.estimate(4, 200).unwrap();
        let x0 = moment_from_dual(&mu, &f, 2).unwrap();
        assert!((e0.mean - x0).abs() <= 3.0 * e0.stderr + 1e-5);
    }

    #[test]
    fn constant_kappa_jump_estimator_matches_pde() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let axis = Grid::line(-3.0, 3.0, 25).unwrap();
        let mu = GridField::from_fn(axis.clone(), |x| heat_kernel(0.25, x));
        let f = GridField::from_fn(axis.power(2), |_| 1.0);
        let kappa = CorrelationKernel::constant(1.0).unwrap();
        let est = JumpEstimator::new(&f, &mu, &kappa, &gen, 0.25, 50, DEFAULT_JUMP_CAP).unwrap();
        let e = est.estimate(5, 10_000).unwrap();
        let pde = moment_from_dual(&mu, &solve_moment_pde(&f, &kappa, &gen, 0.25, 50).unwrap(), 2).unwrap();
        assert!((e.mean - pde).abs() < 0.01 * pde, "{e:?} vs {pde}");
    }

    #[test]
    fn runaway_jumps_are_reported() {
        let gen = NParticleGenerator::new(2, box_rho()).unwrap();
        let axis = Grid::line(-3.0, 3.0, 25).unwrap();
        let mu = GridField::from_fn(axis.clone(), |x| heat_kernel(0.25, x));
        let f = GridField::from_fn(axis.power(2), |_| 1.0);
        let est = JumpEstimator::new(&f, &mu, &CorrelationKernel::constant(1.0).unwrap(), &gen, 0.25, 50, 0).unwrap();
        let mut hit = false;
        for r in 0..50 {
            if let Err(e) = est.replica_value(&mut substream(6, "t", r)) {
                assert!(matches!(e, Error::RunawayJumps { .. }));
                hit = true;
            }
        }
        assert!(hit);
    }

    #[test]
    fn clock_rates() {
        let rho = box_rho();
        assert_eq!(NParticleGenerator::new(1, rho.clone()).unwrap().clock_rate(), 0.0);
        assert_eq!(NParticleGenerator::new(2, rho.clone()).unwrap().clock_rate(), 1.0);
        assert_eq!(NParticleGenerator::new(3, rho).unwrap().clock_rate(), 3.0);
    }

    #[test]
    fn product_pairing_of_two_atoms() {
        let mu = EmpiricalMeasure::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(product_pairing(&mu, 2, |_| 1.0), 1.0);
        // (0*0 + 0*1 + 1*0 + 1*1) / 4
        assert_eq!(product_pairing(&mu, 2, |x| x[0] * x[1]), 0.25);
    }

    proptest! {
        #[test]
        fn full_diffusion_matrix_is_psd(x1 in -2.0f64..2.0, x2 in -2.0f64..2.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let rho = box_rho();
            let r0 = rho.rho0()[0];
            let r12 = rho.eval(&[x1 - x2])[0];
            let q = (1.0 + r0) * (a * a + b * b) + 2.0 * r12 * a * b;
            prop_assert!(q >= -1e-12);
        }

        #[test]
        fn nonnegative_data_stay_nonnegative(c in 0.0f64..2.0, w in 0.3f64..1.5) {
            let gen = NParticleGenerator::new(2, box_rho()).unwrap();
            let grid = Grid::cube(2, -3.0, 3.0, 25).unwrap();
            let f = GridField::from_fn(grid, |x| (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * w * w)).exp());
            let kappa = CorrelationKernel::gauss(c, 1.0, 4.0).unwrap();
            let v = solve_moment_pde(&f, &kappa, &gen, 0.1, 40).unwrap();
            prop_assert!(v.values.iter().all(|&x| x >= 0.0));
        }
    }
}
