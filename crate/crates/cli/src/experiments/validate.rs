//! Fast invariant suite over every primary module.

use superenv::duality::{apply_generator, moment_from_dual, solve_moment_pde, NParticleGenerator};
use superenv::grid::{Grid, GridField};
use superenv::kernels::{build_rho, default_quad_step, CorrelationKernel, MatrixKernel, Profile};
use superenv::linalg::GaussianFactor;
use superenv::measures::{heat_kernel, holder_exponent, kde, pair, TestFunction};
use superenv::mild::{estimate_conditional_density, FrozenEnvironment, MildConfig, MildReplica};
use superenv::particles::{
    branch, motion_step, simulate, EmpiricalMeasure, InitialLaw, MotionConfig, MotionMode, ParticleSystem, SimConfig,
    SnapshotSchedule, Time,
};
use superenv::scalar::Estimate;
use superenv::{derive_seed, substream, Label};

use super::{Context, Outcome};
use crate::output::{num, write_csv, Check};
use crate::RunError;

fn box_kernel() -> Result<MatrixKernel<f64>, RunError> {
    Ok(MatrixKernel::isotropic(1, Profile::Box { width: 1.0 }, 1.0)?)
}

fn seeds(master: u64) -> Vec<Check> {
    let a = derive_seed(master, &[Label::Str("replica"), Label::Int(1)]);
    let b = derive_seed(master, &[Label::Str("replica"), Label::Int(1)]);
    let c = derive_seed(master, &[Label::Int(1), Label::Str("replica")]);
    vec![Check::flag("seed_reproducible", a == b), Check::flag("seed_order_sensitive", a != c)]
}

fn kernels(master: u64) -> Result<Vec<Check>, RunError> {
    let h = box_kernel()?;
    let rho = build_rho(&h, default_quad_step(&h))?;
    let kappa = CorrelationKernel::gauss(1.0, 1.0, 4.0)?;
    let points: Vec<f64> = (0..24).map(|i| -3.0 + 0.25 * i as f64).collect();
    let factor = GaussianFactor::new(&kappa.gram(&points, 1));
    let mut rng = substream(master, "validate-kernels", 0);
    let draws = factor.as_ref().map(|f| f.sample(&mut rng).iter().all(|v| v.is_finite())).unwrap_or(false);
    Ok(vec![
        Check::near("rho0_box", rho.rho0()[0], 1.0, 1e-3),
        Check::flag("gram_factorizes", draws),
    ])
}

fn particles(master: u64) -> Result<Vec<Check>, RunError> {
    let h = box_kernel()?;
    let rho = build_rho(&h, default_quad_step(&h))?;
    let motion = MotionConfig::new(4, 4, h.clone(), rho.clone(), MotionMode::CoupledExact)?;
    let mut rng = substream(master, "validate-motion", 0);
    let incs: Vec<f64> = (0..4000).map(|_| motion_step(&[0.0], &motion, &mut rng).map(|p| p[0])).collect::<Result<_, _>>()?;
    let est = Estimate::from_samples(&incs);
    let dt = 1.0 / 16.0;
    let var_se = dt * (2.0 / incs.len() as f64).sqrt() * 2.0;
    let mut checks = vec![
        Check::within_se("one_particle_mean", est.mean, est.stderr, 0.0, 5.0, 0.0),
        Check::within_se("one_particle_variance", est.variance(), var_se, 2.0 * dt, 5.0, 0.0),
    ];

    let zero = MatrixKernel::zero(1);
    let zero_rho = build_rho(&zero, 0.1)?;
    let sim = SimConfig {
        motion: MotionConfig::new(10, 2, zero, zero_rho, MotionMode::CoupledExact)?,
        kappa: CorrelationKernel::zero(),
        particle_cap: 1000,
        schedule: SnapshotSchedule::BranchTimes,
    };
    let init = InitialLaw::Gauss { sd: 1.0 }.sample(1, 10, &mut rng)?;
    let traj = simulate(&init, Time::new(1, 2), &sim, &mut rng)?;
    checks.push(Check::near("deterministic_mass", traj.terminal.total_mass(), 1.0, 0.0));

    let kappa = CorrelationKernel::gauss(1.0, 1.0, 4.0)?;
    let motion = MotionConfig::new(20, 1, h, rho, MotionMode::CoupledExact)?;
    let mut sys = ParticleSystem::from_measure(&InitialLaw::Gauss { sd: 1.0 }.sample(1, 20, &mut rng)?);
    let mut sound = true;
    for _ in 0..8 {
        sys.advance(&motion, &mut rng)?;
        branch(&mut sys, &kappa, &mut rng)?;
        let g = sys.generation();
        sound &= sys.indices().iter().all(|a| a.generation() == g);
        sound &= sys.measure().total_mass() * 20.0 == sys.len() as f64;
    }
    checks.push(Check::flag("genealogy_and_bookkeeping", sound));
    Ok(checks)
}

fn measures() -> Result<Vec<Check>, RunError> {
    let mu = EmpiricalMeasure::new(1, 1, vec![0.0])?;
    let grid = Grid::line(-8.0, 8.0, 321)?;
    let field = kde(&mu, 1.0, &grid)?;
    let two = EmpiricalMeasure::new(1, 2, vec![0.0, 1.0])?;
    let samples: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|&l| (l, l.powf(1.0))).collect();
    let fit = holder_exponent(&samples, 1.0)?;
    Ok(vec![
        Check::near("kde_center", field.values[160], 1.0 / (2.0 * std::f64::consts::PI).sqrt(), 1e-12),
        Check::near("kde_mass", field.integral(), 1.0, 0.01),
        Check::near("pair_two_atoms", pair(&two, &TestFunction::coordinate(1, 0)), 0.5, 1e-15),
        Check::near("holder_exact_power", fit.exponent, 0.5, 1e-12),
    ])
}

fn duality() -> Result<Vec<Check>, RunError> {
    let h = box_kernel()?;
    let rho = build_rho(&h, default_quad_step(&h))?;
    let gen = NParticleGenerator::new(2, rho.clone())?;
    let line = Grid::line(-5.0, 5.0, 41)?;
    let mu = GridField::from_fn(line.clone(), |x| InitialLaw::Gauss { sd: 1.0 }.density(x));
    let f = GridField::from_fn(line.power(2), |_| 1.0);
    let steps = super::moments::stable_steps(&gen, &f.grid, 0.25, 200);
    let v = solve_moment_pde(&f, &CorrelationKernel::constant(1.0)?, &gen, 0.25, steps)?;
    let second = moment_from_dual(&mu, &v, 2)?;

    let smooth = |x: &[f64]| (0.7 * x[0]).sin() * (0.5 * x[1]).cos();
    let exact = |x: &[f64]| {
        let (s0, c0) = (0.7 * x[0]).sin_cos();
        let (s1, c1) = (0.5 * x[1]).sin_cos();
        -0.74 * s0 * c1 + rho.scalar(&[x[0] - x[1]]) * (-0.35 * c0 * s1)
    };
    let mut errors = Vec::new();
    for nodes in [21, 41, 81] {
        let grid = Grid::cube(2, -2.0, 2.0, nodes)?;
        let av = apply_generator(&GridField::from_fn(grid.clone(), smooth), &gen)?;
        let mut err = 0.0f64;
        for p in 0..grid.len() {
            let idx = grid.unravel(p);
            if idx.iter().all(|&i| i > 0 && i + 1 < nodes) {
                err = err.max((av.values[p] - exact(&grid.node(p))).abs());
            }
        }
        errors.push(err);
    }
    let order = (errors[0] / errors[1]).min(errors[1] / errors[2]);
    Ok(vec![
        Check::near("second_moment_constant_kappa", second, 0.25f64.exp(), 2e-3),
        Check { statistic: "stencil_error_ratio".into(), value: order, stderr: None, tolerance: 3.5, pass: order >= 3.5 },
    ])
}

fn mild(master: u64) -> Result<Vec<Check>, RunError> {
    let x_grid = Grid::line(-3.0, 3.0, 25)?;
    let mut cfg = MildConfig::new(0.25);
    cfg.coarse_steps = 4;
    cfg.substeps = 2;
    cfg.paths = 1000;
    cfg.z_stride = 2;
    let mu = GridField::from_fn(x_grid.clone(), |x| heat_kernel(0.25, x));
    let rep = MildReplica::sample(&box_kernel()?, &CorrelationKernel::zero(), &x_grid, &cfg, master, 0)?;
    let sol = rep.picard(&mu, 3)?;
    let tail = sol.diffs[1..].iter().fold(0.0f64, |m, &d| m.max(d));

    let zero = MatrixKernel::zero(1);
    let env = FrozenEnvironment::sample(&zero, &x_grid, &cfg, master)?;
    let cd = estimate_conditional_density(&env, cfg.fine_dt(), 0, &[0.0], &[cfg.fine_steps()], &x_grid, 5000, None, master)?;
    let eps = cd.bandwidths[0];
    let err = (0..x_grid.len())
        .map(|k| (cd.slice(0, 0)[k] - heat_kernel(0.25 + eps, &[x_grid.coord(0, k)])).abs())
        .fold(0.0f64, f64::max);
    Ok(vec![Check::near("mild_zero_kappa_tail_diffs", tail, 0.0, 0.0), Check::near("free_conditional_density", err, 0.0, 0.05)])
}

pub fn run(ctx: &Context<'_>) -> Outcome {
    let master = ctx.cfg.seed()?;
    let mut checks = seeds(master);
    checks.extend(kernels(master)?);
    checks.extend(particles(master)?);
    checks.extend(measures()?);
    checks.extend(duality()?);
    checks.extend(mild(master)?);
    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![c.statistic.clone(), num(c.value), c.stderr.map(num).unwrap_or_default(), num(c.tolerance), c.pass.to_string()]
        })
        .collect();
    let files = vec![write_csv(ctx.out, "validate.csv", &["statistic", "value", "stderr", "tolerance", "pass"], &rows)?];
    Ok((checks, files))
}
