//! Measure-valued statistics: pairings, heat-kernel density estimates,
//! Hölder-exponent fits and martingale-problem diagnostics.

use std::fmt;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridField};
use crate::kernels::{CorrelationKernel, RhoKernel};
use crate::particles::{time_to_real, EmpiricalMeasure, Trajectory};
use crate::scalar::{compensated_sum, Estimate, Real};

type Eval<T> = Box<dyn Fn(&[T]) -> T + Send + Sync>;
type Deriv<T> = Box<dyn Fn(&[T], &mut [T]) + Send + Sync>;

/// A `C^2` function with its gradient and Hessian.
pub struct TestFunction<T> {
    id: String,
    dim: usize,
    bounded: bool,
    eval: Eval<T>,
    gradient: Deriv<T>,
    hessian: Deriv<T>,
}

impl<T> fmt::Debug for TestFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction").field("id", &self.id).field("dim", &self.dim).field("bounded", &self.bounded).finish()
    }
}

impl<T: Real> TestFunction<T> {
    pub fn new(
        id: impl Into<String>,
        dim: usize,
        bounded: bool,
        eval: impl Fn(&[T]) -> T + Send + Sync + 'static,
        gradient: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
        hessian: impl Fn(&[T], &mut [T]) + Send + Sync + 'static,
    ) -> Self {
        Self { id: id.into(), dim, bounded, eval: Box::new(eval), gradient: Box::new(gradient), hessian: Box::new(hessian) }
    }

    pub fn constant(dim: usize, c: T) -> Self {
        Self::new(
            format!("const({c})"),
            dim,
            true,
            move |_| c,
            |_, g| g.iter_mut().for_each(|v| *v = T::zero()),
            |_, h| h.iter_mut().for_each(|v| *v = T::zero()),
        )
    }

    /// `phi(x) = x_axis`; unbounded.
    pub fn coordinate(dim: usize, axis: usize) -> Self {
        Self::new(
            format!("x{axis}"),
            dim,
            false,
            move |x| x[axis],
            move |_, g| {
                g.iter_mut().for_each(|v| *v = T::zero());
                g[axis] = T::one();
            },
            |_, h| h.iter_mut().for_each(|v| *v = T::zero()),
        )
    }

    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
    pub fn gaussian_bump(center: Vec<T>, width: T, amplitude: T) -> Self {
        let dim = center.len();
        let w2 = width * width;
        let id = format!("bump(w={width})");
        let value = {
            let center = center.clone();
            move |x: &[T]| {
                let r2 = x.iter().zip(&center).fold(T::zero(), |s, (&a, &c)| s + (a - c) * (a - c));
                amplitude * (-r2 / (T::two() * w2)).exp()
            }
        };
        let v1 = value.clone();
        let v2 = value.clone();
        let c1 = center.clone();
        let c2 = center;
        Self::new(
            id,
            dim,
            true,
            value,
            move |x, g| {
                let f = v1(x);
                for i in 0..x.len() {
                    g[i] = -f * (x[i] - c1[i]) / w2;
                }
            },
            move |x, h| {
                let f = v2(x);
                let d = x.len();
                for i in 0..d {
                    for j in 0..d {
                        let delta = if i == j { T::one() / w2 } else { T::zero() };
                        h[i * d + j] = f * ((x[i] - c2[i]) * (x[j] - c2[j]) / (w2 * w2) - delta);
                    }
                }
            },
        )
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    #[inline]
    pub fn eval(&self, x: &[T]) -> T {
        (self.eval)(x)
    }

    pub fn gradient_into(&self, x: &[T], out: &mut [T]) {
        (self.gradient)(x, out)
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.dim];
        self.gradient_into(x, &mut g);
        g
    }

    /// Row-major `d x d`.
    pub fn hessian(&self, x: &[T]) -> Vec<T> {
        let mut h = vec![T::zero(); self.dim * self.dim];
        (self.hessian)(x, &mut h);
        h
    }

    /// One-particle generator `A phi = 1/2 sum_ij (delta_ij + rho^ij(0)) d_ij phi`.
    pub fn generator(&self, rho0: &[T], x: &[T]) -> T {
        let h = self.hessian(x);
        let d = self.dim;
        let mut acc = T::zero();
        for i in 0..d {
            for j in 0..d {
                let a = rho0[i * d + j] + if i == j { T::one() } else { T::zero() };
                acc += a * h[i * d + j];
            }
        }
        acc * T::half()
    }
}

/// `<mu, phi> = (1/n) sum phi(atom)`.
pub fn pair<T: Real>(mu: &EmpiricalMeasure<T>, phi: &TestFunction<T>) -> T {
    pair_with(mu, |x| phi.eval(x))
}

pub fn pair_with<T: Real>(mu: &EmpiricalMeasure<T>, f: impl Fn(&[T]) -> T) -> T {
    compensated_sum(mu.iter().map(f)) * mu.mass_per_atom()
}

/// Heat kernel `p_eps(x) = (2 pi eps)^{-d/2} exp(-|x|^2 / (2 eps))`.
#[inline]
pub fn heat_kernel<T: Real>(eps: T, x: &[T]) -> T {
    let r2 = x.iter().fold(T::zero(), |s, &v| s + v * v);
    let norm = (T::two() * T::lit(std::f64::consts::PI) * eps).powf(T::of_usize(x.len()) * T::half());
    (-r2 / (T::two() * eps)).exp() / norm
}

/// `<mu, p_eps(x - .)>`.
pub fn kde_at<T: Real>(mu: &EmpiricalMeasure<T>, eps: T, x: &[T]) -> T {
    let mut diff = vec![T::zero(); x.len()];
    let sum = compensated_sum(mu.iter().map(|a| {
        for i in 0..x.len() {
            diff[i] = x[i] - a[i];
        }
        heat_kernel(eps, &diff)
    }));
    sum * mu.mass_per_atom()
}

/// Heat-kernel density estimate of `mu` at every node of `query`.
pub fn kde<T: Real>(mu: &EmpiricalMeasure<T>, eps: T, query: &Grid<T>) -> Result<GridField<T>> {
    if !(eps > T::zero()) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {eps}")));
    }
    if query.dim() != mu.dim() {
        return Err(Error::DimensionMismatch("query grid and measure dimensions differ".into()));
    }
    let mut x = vec![T::zero(); query.dim()];
    let values = (0..query.len())
        .map(|k| {
            query.node_into(k, &mut x);
            kde_at(mu, eps, &x)
        })
        .collect();
    GridField::new(query.clone(), values, T::zero())
}

/// Plug-in bandwidth: the squared Silverman rule `0.9 min(sd, IQR/1.34) m^{-1/(d+4)}`
/// averaged over axes. Falls back to 1 for fewer than two atoms.
pub fn default_bandwidth<T: Real>(mu: &EmpiricalMeasure<T>) -> T {
    let m = mu.len();
    if m < 2 {
        return T::one();
    }
    let d = mu.dim();
    let mut acc = T::zero();
    for a in 0..d {
        let mut xs: Vec<T> = mu.iter().map(|x| x[a]).collect();
        xs.sort_by(|p, q| p.partial_cmp(q).expect("finite atoms"));
        let mean = compensated_sum(xs.iter().copied()) / T::of_usize(m);
        let var = compensated_sum(xs.iter().map(|&v| (v - mean) * (v - mean))) / T::of_usize(m - 1);
        let iqr = quantile(&xs, T::lit(0.75)) - quantile(&xs, T::lit(0.25));
        let mut spread = var.sqrt();
        if iqr > T::zero() {
            spread = spread.min(iqr / T::lit(1.34));
        }
        if !(spread > T::zero()) {
            spread = T::one();
        }
        let bw = T::lit(0.9) * spread * T::of_usize(m).powf(-T::one() / T::of_usize(d + 4));
        acc += bw * bw;
    }
    acc / T::of_usize(d)
}

/// Linear-interpolation quantile of sorted data.
fn quantile<T: Real>(sorted: &[T], q: T) -> T {
    let pos = q * T::of_usize(sorted.len() - 1);
    let i = pos.floor().to_usize().unwrap_or(0).min(sorted.len() - 1);
    let j = (i + 1).min(sorted.len() - 1);
    let frac = pos - T::of_usize(i);
    sorted[i] + frac * (sorted[j] - sorted[i])
}

/// Least-squares fit of `log moment` against `log lag`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HolderFit<T> {
    /// Slope divided by `2p`.
    pub exponent: T,
    pub stderr: T,
    pub slope: T,
    pub intercept: T,
}

/// Fits `mean |du|^{2p} ~ C lag^{2p beta}` and returns `beta`.
pub fn holder_exponent<T: Real>(samples: &[(T, T)], p: T) -> Result<HolderFit<T>> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 lags, got {}", samples.len())));
    }
    if !(p > T::zero()) {
        return Err(Error::InvalidArgument("moment order must be positive".into()));
    }
    if samples.iter().any(|&(lag, m)| !(lag > T::zero()) || !(m > T::zero()) || !m.is_finite()) {
        return Err(Error::InvalidArgument("lags and moments must be positive and finite".into()));
    }
    let xs: Vec<T> = samples.iter().map(|s| s.0.ln()).collect();
    let ys: Vec<T> = samples.iter().map(|s| s.1.ln()).collect();
    let k = T::of_usize(samples.len());
    let mx = xs.iter().copied().sum::<T>() / k;
    let my = ys.iter().copied().sum::<T>() / k;
    let sxx = xs.iter().fold(T::zero(), |s, &x| s + (x - mx) * (x - mx));
    if !(sxx > T::zero()) {
        return Err(Error::InvalidArgument("lags must not all be equal".into()));
    }
    let sxy = xs.iter().zip(&ys).fold(T::zero(), |s, (&x, &y)| s + (x - mx) * (y - my));
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = xs.iter().zip(&ys).fold(T::zero(), |s, (&x, &y)| {
        let r = y - intercept - slope * x;
        s + r * r
    });
    let slope_se = (rss / (k - T::two()) / sxx).sqrt();
    let scale = T::two() * p;
    Ok(HolderFit { exponent: slope / scale, stderr: slope_se / scale, slope, intercept })
}

/// Mean `|u[i + lag] - u[i]|^{2p}` for each lag (in index units).
pub fn increment_moments<T: Real>(series: &[T], lags: &[usize], p: T) -> Vec<T> {
    lags.iter()
        .map(|&lag| {
            let count = series.len().saturating_sub(lag);
            if count == 0 {
                return T::nan();
            }
            let s = compensated_sum((0..count).map(|i| (series[i + lag] - series[i]).abs().powf(T::two() * p)));
            s / T::of_usize(count)
        })
        .collect()
}

/// Outcome of the martingale-problem check for one test function.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleReport<T> {
    pub phi: String,
    pub horizon: T,
    /// Replicate mean and standard error of `M_T(phi)`.
    pub mean: Estimate<T>,
    /// Empirical variance of `M_T(phi)`.
    pub variance: T,
    /// Replicate mean of the quadratic-variation integral.
    pub quadratic_variation: Estimate<T>,
    /// `|variance - qv| / qv`.
    pub rel_dev: T,
}

/// Trapezoid integral of `values` over `times`.
pub fn trapezoid<T: Real>(times: &[T], values: &[T]) -> T {
    let mut acc = T::zero();
    for k in 1..times.len() {
        acc += (times[k] - times[k - 1]) * (values[k] + values[k - 1]) * T::half();
    }
    acc
}

/// `X^{(2)}(grad phi^T rho grad phi + kappa phi phi)` at one snapshot.
pub fn qv_density<T: Real>(
    mu: &EmpiricalMeasure<T>,
    phi: &TestFunction<T>,
    rho: &RhoKernel<T>,
    kappa: &CorrelationKernel<T>,
) -> T {
    let d = mu.dim();
    let m = mu.len();
    let values: Vec<T> = mu.iter().map(|x| phi.eval(x)).collect();
    let grads: Vec<Vec<T>> = mu.iter().map(|x| phi.gradient(x)).collect();
    let mut diff = vec![T::zero(); d];
    let mut r = vec![T::zero(); d * d];
    let mut acc = T::zero();
    for a in 0..m {
        let xa = mu.atom(a);
        for b in 0..m {
            let xb = mu.atom(b);
            for i in 0..d {
                diff[i] = xa[i] - xb[i];
            }
            rho.eval_into(&diff, &mut r);
            let mut drift = T::zero();
            for i in 0..d {
                for j in 0..d {
                    drift += grads[a][i] * r[i * d + j] * grads[b][j];
                }
            }
            acc += drift + kappa.eval(xa, xb) * values[a] * values[b];
        }
    }
    let w = mu.mass_per_atom();
    acc * w * w
}

/// `M_T(phi) = X_T(phi) - X_0(phi) - int_0^T X_s(A phi) ds` per replica, its
/// mean and variance, and the replicate mean of the quadratic-variation integral.
pub fn martingale_diagnostics<T: Real>(
    replicas: &[Trajectory<T>],
    phi: &TestFunction<T>,
    rho: &RhoKernel<T>,
    kappa: &CorrelationKernel<T>,
) -> Result<MartingaleReport<T>> {
    if replicas.len() < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 replicas, got {}", replicas.len())));
    }
    let times = replicas[0].times();
    if replicas.iter().any(|r| r.times() != times) {
        return Err(Error::SnapshotMismatch);
    }
    if times.len() < 2 {
        return Err(Error::InvalidArgument("need at least two snapshots".into()));
    }
    let t: Vec<T> = times.iter().map(|&s| time_to_real(s)).collect();
    let rho0 = rho.rho0();
    let mut ms = Vec::with_capacity(replicas.len());
    let mut qvs = Vec::with_capacity(replicas.len());
    for traj in replicas {
        let drift: Vec<T> = traj.snapshots.iter().map(|s| pair_with(&s.measure, |x| phi.generator(rho0, x))).collect();
        let qv: Vec<T> = traj.snapshots.iter().map(|s| qv_density(&s.measure, phi, rho, kappa)).collect();
        let x0 = pair(&traj.snapshots[0].measure, phi);
        let xt = pair(&traj.terminal, phi);
        ms.push(xt - x0 - trapezoid(&t, &drift));
        qvs.push(trapezoid(&t, &qv));
    }
    let mean = Estimate::from_samples(&ms);
    let variance = mean.variance();
    let quadratic_variation = Estimate::from_samples(&qvs);
    let qv = quadratic_variation.mean;
    let rel_dev = if qv > T::zero() {
        (variance - qv).abs() / qv
    } else if variance == T::zero() {
        T::zero()
    } else {
        T::infinity()
    };
    Ok(MartingaleReport {
        phi: phi.id().to_string(),
        horizon: *t.last().expect("snapshots"),
        mean,
        variance,
        quadratic_variation,
        rel_dev,
    })
}
