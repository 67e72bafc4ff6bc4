//! Monte Carlo moments of `X_T` against the dual PDE and jump oracles.

use superenv::duality::{
    moment_from_dual, product_pairing, solve_moment_pde, JumpEstimator, MomentReport, NParticleGenerator, DEFAULT_JUMP_CAP,
};
use superenv::grid::{Grid, GridField};
use superenv::kernels::Decay;
use superenv::measures::TestFunction;
use superenv::particles::SnapshotSchedule;
use superenv::scalar::Estimate;
use superenv::{derive_seed, Label};

use super::simulate::replica;
use super::{Context, Outcome};
use crate::output::{num, write_csv, write_json, Check};
use crate::pool::try_map_indexed;
use crate::RunError;

/// Explicit Euler steps: the configured count, raised to meet the stability bound.
pub fn stable_steps(gen: &NParticleGenerator<f64>, grid: &Grid<f64>, t: f64, configured: usize) -> usize {
    let bound = gen.stability_bound(grid);
    configured.max((t / (0.9 * bound)).ceil() as usize)
}

pub fn run(ctx: &Context<'_>) -> Outcome {
    let cfg = ctx.cfg;
    let m = ctx.model;
    let order = cfg.count("moments.order")?;
    let d = m.dim;
    let t = m.horizon_f64();
    let phi = match cfg.raw("moments.f") {
        "bump" => TestFunction::gaussian_bump(vec![0.0; d], cfg.f64("moments.bump_width")?, 1.0),
        _ => TestFunction::constant(d, 1.0),
    };
    let f = |x: &[f64]| x.chunks_exact(d).map(|p| phi.eval(p)).product::<f64>();

    let replicas = cfg.count("run.replicas")?;
    let values = try_map_indexed(ctx.workers, replicas, |r| -> Result<f64, RunError> {
        let traj = replica(ctx, r, SnapshotSchedule::BranchTimes)?;
        Ok(product_pairing(&traj.terminal, order, f))
    })?;
    let mc = Estimate::from_samples(&values);

    let half = cfg.f64("moments.grid_half_width")?;
    let nodes = cfg.count("moments.grid_nodes")?;
    let mu_grid = Grid::cube(d, -half, half, nodes)?;
    let mu = GridField::from_fn(mu_grid.clone(), |x| m.init.density(x));
    let f_grid = mu_grid.power(order);
    let f_field = GridField::from_fn(f_grid.clone(), f);
    let gen = NParticleGenerator::new(order, m.rho.clone())?;
    let steps = stable_steps(&gen, &f_grid, t, cfg.count("moments.pde_steps")?);
    let v = solve_moment_pde(&f_field, &m.kappa, &gen, t, steps)?;
    let pde = moment_from_dual(&mu, &v, order)?;

    let jump_replicas = cfg.amount("moments.jump_replicas")?;
    let jump = if jump_replicas > 0 && order >= 2 {
        let est = JumpEstimator::new(&f_field, &mu, &m.kappa, &gen, t, steps, DEFAULT_JUMP_CAP)?;
        Some(est.estimate(derive_seed(cfg.seed()?, &[Label::Str("dual-jump")]), jump_replicas)?)
    } else {
        None
    };

    let test_mode = m.kappa.decay() == Decay::ConstantTestMode;
    let report = MomentReport {
        n: order,
        t,
        f_id: phi.id().to_string(),
        mc_value: mc.mean,
        mc_se: mc.stderr,
        pde_value: pde,
        jump_value: jump.map(|j| j.mean),
        jump_se: jump.map(|j| j.stderr),
        rel_dev: (mc.mean - pde).abs() / pde.abs(),
        test_mode,
    };
    let mut files = vec![write_json(ctx.out, "moments.json", &serde_json::json!({ "schema": 1, "moment": report }))?];
    let rows: Vec<Vec<String>> = values.iter().enumerate().map(|(r, &v)| vec![r.to_string(), num(v)]).collect();
    files.push(write_csv(ctx.out, "moments.csv", &["replica", "value"], &rows)?);
    let summary = vec![vec![
        order.to_string(),
        num(t),
        phi.id().to_string(),
        num(mc.mean),
        num(mc.stderr),
        num(pde),
        jump.map(|j| num(j.mean)).unwrap_or_default(),
        jump.map(|j| num(j.stderr)).unwrap_or_default(),
    ]];
    files.push(write_csv(
        ctx.out,
        "moment_summary.csv",
        &["n", "t", "f", "mc_value", "mc_se", "pde_value", "jump_value", "jump_se"],
        &summary,
    )?);

    let rel = if test_mode { 0.05 } else { 0.10 };
    let mut checks = vec![Check::within_se("mc_vs_pde", mc.mean, mc.stderr, pde, 3.0, rel)];
    if let Some(j) = jump {
        let gap = (j.mean - pde).abs();
        let se_band = (3.0 * j.stderr).max(1e-9 * pde.abs());
        checks.push(Check {
            statistic: "jump_vs_pde".into(),
            value: j.mean,
            stderr: Some(j.stderr),
            tolerance: se_band.min(0.02 * pde.abs()),
            pass: gap <= se_band && gap <= 0.02 * pde.abs(),
        });
    }
    Ok((checks, files))
}
