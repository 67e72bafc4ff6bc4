use superenv::duality::{moment_from_dual, solve_moment_pde};
use superenv::kernels::build_rho;
use superenv::measures::{pair, TestFunction};
use superenv::particles::{simulate, InitialLaw, MotionMode, SnapshotSchedule, Time};
use superenv::{
    stream, CorrelationKernel, Estimate, Grid, GridField, Label, MatrixKernel, MotionConfig, NParticleGenerator, Profile,
    SimConfig,
};

fn setup() -> (MatrixKernel, superenv::RhoKernel) {
    let h = MatrixKernel::isotropic(1, Profile::Box { width: 1.0 }, 1.0).unwrap();
    let rho = build_rho(&h, 1e-3).unwrap();
    (h, rho)
}

fn gauss_mu(grid: &Grid) -> GridField {
    GridField::from_fn(grid.clone(), |x| InitialLaw::Gauss { sd: 1.0 }.density(x))
}

#[test]
fn first_moment_matches_the_closed_form() {
    // E X_T(phi) = (1 / (1 + 1 + T (1 + rho(0))))^{1/2} for mu = N(0, 1), phi = exp(-x^2 / 2)
    let (_, rho) = setup();
    let target = (1.0f64 / 2.5).sqrt();
    let line = Grid::line(-6.0, 6.0, 121).unwrap();
    let gen = NParticleGenerator::new(1, rho).unwrap();
    let phi = TestFunction::gaussian_bump(vec![0.0], 1.0, 1.0);
    let v = solve_moment_pde(&GridField::from_fn(line.clone(), |x| phi.eval(x)), &CorrelationKernel::constant(1.0).unwrap(), &gen, 0.25, 200)
        .unwrap();
    let m = moment_from_dual(&gauss_mu(&line), &v, 1).unwrap();
    assert!((m - target).abs() < 2e-3, "{m} vs {target}");
}

#[test]
fn second_total_mass_moment_grows_exponentially_for_constant_kappa() {
    // E X_T(1)^2 = e^T when kappa = 1 and mu has unit mass
    let (_, rho) = setup();
    let line = Grid::line(-5.0, 5.0, 41).unwrap();
    let grid = line.power(2);
    let gen = NParticleGenerator::new(2, rho).unwrap();
    let v = solve_moment_pde(&GridField::from_fn(grid, |_| 1.0), &CorrelationKernel::constant(1.0).unwrap(), &gen, 0.25, 200).unwrap();
    let m = moment_from_dual(&gauss_mu(&line), &v, 2).unwrap();
    let target = 0.25f64.exp();
    assert!((m - target).abs() < 5e-3 * target, "{m} vs {target}");
}

#[test]
fn particle_mean_agrees_with_the_first_moment_equation() {
    let (h, rho) = setup();
    let n = 40;
    let cfg = SimConfig {
        motion: MotionConfig::new(n, 4, h, rho.clone(), MotionMode::CoupledExact).unwrap(),
        kappa: CorrelationKernel::gauss(1.0, 1.0, 4.0).unwrap(),
        particle_cap: 100_000,
        schedule: SnapshotSchedule::BranchTimes,
    };
    let phi = TestFunction::gaussian_bump(vec![0.0], 1.0, 1.0);
    let samples: Vec<f64> = (0..300)
        .map(|r| {
            let mut rng = stream(5, &[Label::Str("replica"), Label::Int(r)]);
            let init = InitialLaw::Gauss { sd: 1.0 }.sample(1, n, &mut rng).unwrap();
            pair(&simulate(&init, Time::new(1, 4), &cfg, &mut rng).unwrap().terminal, &phi)
        })
        .collect();
    let est = Estimate::from_samples(&samples);
    let target = (1.0f64 / 2.5).sqrt();
    assert!(est.z_score(target) < 4.0, "{} +- {} vs {target}", est.mean, est.stderr);
}
