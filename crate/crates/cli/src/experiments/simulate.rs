//! Forward Monte Carlo trajectories of the particle system.

use superenv::particles::{simulate, time_to_real, EmpiricalMeasure, SnapshotSchedule, Trajectory};
use superenv::scalar::Estimate;
use superenv::{stream, Label};

use super::{Context, Outcome};
use crate::output::{num, write_csv, Check};
use crate::pool::try_map_indexed;
use crate::RunError;

/// One replica from the stream `(seed, "replica", r)`.
pub fn replica(ctx: &Context<'_>, r: usize, schedule: SnapshotSchedule) -> Result<Trajectory<f64>, RunError> {
    let m = ctx.model;
    let seed = ctx.cfg.seed()?;
    let sim = m.sim_config(schedule)?;
    let mut rng = stream(seed, &[Label::Str("replica"), Label::Int(r as u64)]);
    let init = m.init.sample(m.dim, m.n, &mut rng)?;
    Ok(simulate(&init, m.horizon, &sim, &mut rng)?)
}

fn positions_cell(mu: &EmpiricalMeasure<f64>) -> String {
    mu.atoms().iter().map(|&v| num(v)).collect::<Vec<_>>().join(" ")
}

fn histogram(mu: &EmpiricalMeasure<f64>, bins: usize, half_width: f64) -> Vec<String> {
    let mut counts = vec![0u64; bins];
    let width = 2.0 * half_width / bins as f64;
    for x in mu.iter() {
        let k = ((x[0] + half_width) / width).floor();
        if k >= 0.0 && (k as usize) < bins {
            counts[k as usize] += 1;
        }
    }
    counts.iter().map(u64::to_string).collect()
}

pub fn run(ctx: &Context<'_>) -> Outcome {
    let replicas = ctx.cfg.count("run.replicas")?;
    let trajs = try_map_indexed(ctx.workers, replicas, |r| replica(ctx, r, SnapshotSchedule::BranchTimes))?;
    let hist = ctx.cfg.raw("output.trajectory") == "histogram";
    let bins = ctx.cfg.count("output.bins")?;
    let half_width = ctx.cfg.f64("output.hist_half_width")?;
    let n = ctx.model.n;
    let mut files = Vec::new();
    let mut bookkeeping_gap = 0.0f64;
    let mut increments = Vec::new();
    let mut summary = Vec::new();
    for (r, traj) in trajs.iter().enumerate() {
        let mut header = vec!["time".to_string(), "atom_count".into(), "mass".into()];
        if hist {
            header.extend((0..bins).map(|k| format!("bin_{k}")));
        } else {
            header.push("positions".into());
        }
        let mut rows = Vec::new();
        let mut emit = |time: f64, mu: &EmpiricalMeasure<f64>| {
            let mass = mu.total_mass();
            bookkeeping_gap = bookkeeping_gap.max((mass * n as f64 - mu.len() as f64).abs());
            let mut row = vec![num(time), mu.len().to_string(), num(mass)];
            if hist {
                row.extend(histogram(mu, bins, half_width));
            } else {
                row.push(positions_cell(mu));
            }
            rows.push(row);
        };
        for s in &traj.snapshots {
            emit(time_to_real(s.time), &s.measure);
        }
        emit(ctx.model.horizon_f64(), &traj.terminal);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        files.push(write_csv(ctx.out, &format!("trajectory_{r:04}.csv"), &header, &rows)?);

        let masses: Vec<f64> = traj.snapshots.iter().skip(1).map(|s| s.measure.total_mass()).chain([traj.terminal.total_mass()]).collect();
        let mut prev = traj.snapshots[0].measure.total_mass();
        for &mass in &masses {
            increments.push(mass - prev);
            prev = mass;
        }
        summary.push(vec![
            r.to_string(),
            num(traj.snapshots[0].measure.total_mass()),
            num(traj.terminal.total_mass()),
            traj.branch_events.to_string(),
            traj.extinction.map(|t| num(time_to_real(t))).unwrap_or_default(),
        ]);
    }
    files.push(write_csv(ctx.out, "mass.csv", &["replica", "initial_mass", "terminal_mass", "branch_events", "extinction_time"], &summary)?);

    let mut checks = vec![Check::near("mass_bookkeeping_gap", bookkeeping_gap, 0.0, 0.0)];
    let terminal: Vec<f64> = trajs.iter().map(|t| t.terminal.total_mass()).collect();
    if ctx.model.h.is_zero() && ctx.model.kappa.is_zero() {
        let dev = trajs.iter().map(|t| (t.terminal.total_mass() - t.snapshots[0].measure.total_mass()).abs()).fold(0.0, f64::max);
        checks.push(Check::near("deterministic_mass_deviation", dev, 0.0, 0.0));
    }
    if replicas >= 2 {
        let est = Estimate::from_samples(&terminal);
        checks.push(Check::within_se("terminal_mass_mean", est.mean, est.stderr, 1.0, 3.0, 0.0));
    }
    if increments.len() >= 2 {
        let est = Estimate::from_samples(&increments);
        checks.push(Check::within_se("mass_increment_mean", est.mean, est.stderr, 0.0, 3.0, 0.0));
    }
    Ok((checks, files))
}
