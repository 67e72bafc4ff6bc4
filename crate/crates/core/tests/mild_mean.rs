use superenv::kernels::{CorrelationKernel, MatrixKernel, Profile};
use superenv::mild::{default_bandwidth, estimate_conditional_density, FrozenEnvironment, MildConfig, MildReplica};
use superenv::{derive_seed, Estimate, Grid, GridField, Label};

fn box_h() -> MatrixKernel<f64> {
    MatrixKernel::isotropic(1, Profile::Box { width: 1.0 }, 1.0).unwrap()
}

fn normal(var: f64, x: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

#[test]
fn environment_average_of_conditional_density_is_gaussian() {
    // E_W p^W(r, z; t, .) = N(z, (t - r)(1 + rho(0))) smoothed by the kernel bandwidth
    let grid = Grid::line(-3.0, 3.0, 121).unwrap();
    let mut cfg = MildConfig::new(0.1);
    cfg.coarse_steps = 2;
    cfg.substeps = 10;
    let elapsed = 0.1;
    let var = elapsed * 2.0 + default_bandwidth(grid.spacing()[0], elapsed);
    let mut means = Vec::new();
    let mut spreads = Vec::new();
    for e in 0..40u64 {
        let env = FrozenEnvironment::sample(&box_h(), &grid, &cfg, derive_seed(3, &[Label::Str("env"), Label::Int(e)])).unwrap();
        let cd = estimate_conditional_density(&env, cfg.fine_dt(), 0, &[0.5], &[20], &grid, 500, None, derive_seed(3, &[Label::Str("pw"), Label::Int(e)]))
            .unwrap();
        let dx = grid.spacing()[0];
        let p = cd.slice(0, 0);
        let x = |k: usize| grid.node(k)[0];
        means.push((0..grid.len()).map(|k| p[k] * x(k) * dx).sum::<f64>());
        spreads.push((0..grid.len()).map(|k| p[k] * (x(k) - 0.5).powi(2) * dx).sum::<f64>());
    }
    let mean = Estimate::from_samples(&means);
    let spread = Estimate::from_samples(&spreads);
    assert!(mean.z_score(0.5) < 4.0, "mean {} +- {}", mean.mean, mean.stderr);
    assert!(spread.z_score(var) < 4.0, "variance {} +- {} vs {var}", spread.mean, spread.stderr);
}

#[test]
fn mild_solution_mean_follows_the_heat_flow() {
    // E <u_T, phi> with u_0 = N(0, 1/4), phi = exp(-x^2 / 2), variance rate 1 + rho(0) = 2
    let target = (1.0f64 / (1.0 + 0.25 + 0.25 * 2.0)).sqrt();
    let grid = Grid::line(-4.0, 4.0, 65).unwrap();
    let mut cfg = MildConfig::new(0.25);
    cfg.paths = 400;
    cfg.z_stride = 2;
    let kappa = CorrelationKernel::gauss(1.0, 1.0, 4.0).unwrap();
    let mu = GridField::from_fn(grid.clone(), |x| normal(0.25, x[0]));
    let dx = grid.spacing()[0];
    let paired: Vec<f64> = (0..8)
        .map(|r| {
            let rep = MildReplica::sample(&box_h(), &kappa, &grid, &cfg, 11, r).unwrap();
            let u = rep.picard(&mu, 5).unwrap().terminal();
            (0..grid.len()).map(|k| u.values[k] * (-0.5 * grid.node(k)[0].powi(2)).exp() * dx).sum()
        })
        .collect();
    let est = Estimate::from_samples(&paired);
    let gap = (est.mean - target).abs();
    assert!(gap <= (4.0 * est.stderr).max(0.02 * target), "mean {} +- {} vs {target}", est.mean, est.stderr);
}
