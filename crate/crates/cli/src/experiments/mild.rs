//! Mild-form solves and Hölder-exponent estimates on their output.

use superenv::grid::{Grid, GridField};
use superenv::measures::{holder_exponent, increment_moments};
use superenv::mild::{MildConfig, MildReplica, MildSolution};
use superenv::particles::InitialLaw;
use superenv::scalar::Estimate;

use super::{Context, Outcome};
use crate::config::ExperimentConfig;
use crate::model::Model;
use crate::output::{num, write_csv, Check};
use crate::pool::try_map_indexed;
use crate::RunError;

pub fn mild_config(cfg: &ExperimentConfig, model: &Model) -> Result<MildConfig<f64>, RunError> {
    let mut mc = MildConfig::new(model.horizon_f64());
    mc.coarse_steps = cfg.count("mild.coarse_steps")?;
    mc.substeps = cfg.count("mild.substeps")?;
    mc.paths = cfg.count("mild.paths")?;
    mc.z_stride = cfg.count("mild.z_stride")?;
    Ok(mc)
}

pub fn x_grid(cfg: &ExperimentConfig) -> Result<Grid<f64>, RunError> {
    let half = cfg.f64("mild.half_width")?;
    Ok(Grid::line(-half, half, cfg.count("mild.nodes")?)?)
}

pub fn initial_density(cfg: &ExperimentConfig, grid: &Grid<f64>) -> Result<GridField<f64>, RunError> {
    let law = InitialLaw::Gauss { sd: cfg.f64("mild.init_sd")? };
    Ok(GridField::from_fn(grid.clone(), |x| law.density(x)))
}

struct Solved {
    solution: MildSolution<f64>,
    exits: usize,
    paths: usize,
}

fn solve_all(ctx: &Context<'_>) -> Result<(Vec<Solved>, GridField<f64>), RunError> {
    let cfg = ctx.cfg;
    let mc = mild_config(cfg, ctx.model)?;
    let grid = x_grid(cfg)?;
    let mu = initial_density(cfg, &grid)?;
    let seed = cfg.seed()?;
    let iterations = cfg.count("mild.iterations")?;
    let save = cfg.flag("mild.save_env")?;
    let replicas = cfg.count("run.replicas")?;
    let solved = try_map_indexed(ctx.workers, replicas, |r| -> Result<Solved, RunError> {
        let rep = MildReplica::sample(&ctx.model.h, &ctx.model.kappa, &grid, &mc, seed, r as u64)?;
        if save {
            rep.env.save(&ctx.out.join(format!("env_{r:04}")))?;
        }
        let solution = rep.picard(&mu, iterations)?;
        let paths = (0..mc.coarse_steps).map(|i| rep.table.source(i).paths).sum();
        Ok(Solved { solution, exits: rep.table.exits(), paths })
    })?;
    Ok((solved, mu))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Median over replicas of `d*_{k+1} / d*_k`, `k = 1..K-1`.
pub fn median_ratios(diffs: &[Vec<f64>]) -> Vec<f64> {
    let k = diffs.iter().map(Vec::len).min().unwrap_or(0);
    (0..k.saturating_sub(1)).map(|i| median(diffs.iter().map(|d| d[i + 1] / d[i]).collect())).collect()
}

pub fn run(ctx: &Context<'_>) -> Outcome {
    let (solved, mu) = solve_all(ctx)?;
    let mut files = Vec::new();
    for (r, s) in solved.iter().enumerate() {
        let sol = &s.solution;
        let mut rows = Vec::new();
        for (j, &t) in sol.times.iter().enumerate() {
            for (i, &u) in sol.at(j).iter().enumerate() {
                rows.push(vec![num(t), num(sol.x_grid.coord(0, i)), num(u)]);
            }
        }
        files.push(write_csv(ctx.out, &format!("u_{r:04}.csv"), &["t", "x", "u"], &rows)?);
        let rows: Vec<Vec<String>> = sol
            .diffs
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let ratio = if k == 0 { String::new() } else { num(d / sol.diffs[k - 1]) };
                vec![(k + 1).to_string(), num(d), ratio]
            })
            .collect();
        files.push(write_csv(ctx.out, &format!("diffs_{r:04}.csv"), &["k", "d_star", "ratio"], &rows)?);
    }

    let mut checks = Vec::new();
    let sup = solved.iter().map(|s| s.solution.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))).fold(0.0, f64::max);
    checks.push(Check::flag("solution_finite", sup.is_finite()));
    let exits: usize = solved.iter().map(|s| s.exits).sum();
    let paths: usize = solved.iter().map(|s| s.paths).sum();
    checks.push(Check::near("exit_rate", exits as f64 / paths as f64, 0.0, 0.01));
    let diffs: Vec<Vec<f64>> = solved.iter().map(|s| s.solution.diffs.clone()).collect();
    if ctx.model.kappa.is_zero() {
        let tail = diffs.iter().flat_map(|d| d.iter().skip(1)).fold(0.0f64, |m, &v| m.max(v));
        checks.push(Check::near("diffs_after_first", tail, 0.0, 0.0));
    } else {
        let ratios = median_ratios(&diffs);
        let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
        if ratios.len() >= 2 {
            checks.push(Check::flag("median_ratio_decreasing", decreasing));
        }
    }
    let initial = mu.integral();
    let masses: Vec<f64> = solved.iter().map(|s| s.solution.terminal().integral()).collect();
    let est = Estimate::from_samples(&masses);
    checks.push(Check::within_se("terminal_mass_mean", est.mean, est.stderr, initial, 3.0, 0.10));
    Ok((checks, files))
}

/// `(lag, mean)` pairs.
pub type LagMoments = Vec<(f64, f64)>;

/// Mean `|du|^{2p}` over replicas for the space lags on `u_T` and the time
/// lags on `u(., x)` at every node.
pub fn holder_moments(
    solutions: &[&MildSolution<f64>],
    space_lags: &[usize],
    time_lags: &[usize],
    p: f64,
) -> (LagMoments, LagMoments) {
    let dx = solutions[0].x_grid.spacing()[0];
    let dt = solutions[0].times[1] - solutions[0].times[0];
    let nx = solutions[0].x_grid.len();
    let mut space = vec![0.0; space_lags.len()];
    let mut time = vec![0.0; time_lags.len()];
    for sol in solutions {
        let last = sol.times.len() - 1;
        for (acc, m) in space.iter_mut().zip(increment_moments(sol.at(last), space_lags, p)) {
            *acc += m;
        }
        for i in 0..nx {
            let series: Vec<f64> = (0..=last).map(|j| sol.at(j)[i]).collect();
            for (acc, m) in time.iter_mut().zip(increment_moments(&series, time_lags, p)) {
                *acc += m / nx as f64;
            }
        }
    }
    let k = solutions.len() as f64;
    (
        space_lags.iter().zip(&space).map(|(&l, &m)| (l as f64 * dx, m / k)).collect(),
        time_lags.iter().zip(&time).map(|(&l, &m)| (l as f64 * dt, m / k)).collect(),
    )
}

pub fn run_holder(ctx: &Context<'_>) -> Outcome {
    let (solved, _) = solve_all(ctx)?;
    let space_lags = ctx.cfg.counts("holder.space_lags")?;
    let time_lags = ctx.cfg.counts("holder.time_lags")?;
    let p = ctx.cfg.f64("holder.p")?;
    let sols: Vec<&MildSolution<f64>> = solved.iter().map(|s| &s.solution).collect();
    let (space, time) = holder_moments(&sols, &space_lags, &time_lags, p);
    let mut rows = Vec::new();
    for (axis, lags, samples) in [("space", &space_lags, &space), ("time", &time_lags, &time)] {
        for (&lag, &(value, moment)) in lags.iter().zip(samples.iter()) {
            rows.push(vec![axis.to_string(), lag.to_string(), num(value), num(moment)]);
        }
    }
    let mut files = vec![write_csv(ctx.out, "holder.csv", &["axis", "lag", "lag_value", "moment"], &rows)?];
    let fs = holder_exponent(&space, p)?;
    let ft = holder_exponent(&time, p)?;
    let fits = vec![
        vec!["space".into(), num(fs.exponent), num(fs.stderr), num(fs.intercept)],
        vec!["time".into(), num(ft.exponent), num(ft.stderr), num(ft.intercept)],
    ];
    files.push(write_csv(ctx.out, "holder_fit.csv", &["axis", "exponent", "stderr", "intercept"], &fits)?);
    let checks = vec![
        Check::band("space_exponent", fs.exponent, Some(fs.stderr), 0.1, 1.15),
        Check::band("time_exponent", ft.exponent, Some(ft.stderr), 0.1, 0.65),
    ];
    Ok((checks, files))
}
