//! Model objects built from a validated configuration.

use serde_json::{json, Value};
use superenv::kernels::{build_rho, default_quad_step, CorrelationKernel, MatrixKernel, Profile, RhoKernel};
use superenv::particles::{InitialLaw, MotionConfig, MotionMode, SimConfig, SnapshotSchedule, Time};

use crate::config::ExperimentConfig;
use crate::RunError;

#[derive(Debug, Clone)]
pub struct Model {
    pub dim: usize,
    pub n: usize,
    pub substeps: usize,
    pub horizon: Time,
    pub particle_cap: usize,
    pub h: MatrixKernel<f64>,
    pub rho: RhoKernel<f64>,
    pub kappa: CorrelationKernel<f64>,
    pub init: InitialLaw<f64>,
    pub mode: MotionMode<f64>,
}

impl Model {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        let dim = cfg.count("model.dim")?;
        let profile = match cfg.raw("kernel.h") {
            "box" => Some(Profile::Box { width: cfg.f64("kernel.h_width")? }),
            "hat" => Some(Profile::Hat { half_width: cfg.f64("kernel.h_width")? }),
            "gauss" => Some(Profile::Gauss { sigma: cfg.f64("kernel.h_sigma")?, cutoff: cfg.f64("kernel.h_cutoff")? }),
            _ => None,
        };
        let mut h = match profile {
            Some(p) => MatrixKernel::isotropic(dim, p, cfg.f64("kernel.h_amplitude")?)?,
            None => MatrixKernel::zero(dim),
        };
        if cfg.raw("kernel.h_bound") != "auto" {
            h = h.with_sobolev_bound(cfg.f64("kernel.h_bound")?);
        }
        let rho = build_rho(&h, default_quad_step(&h))?;
        let kappa = match cfg.raw("kernel.kappa") {
            "gauss" => CorrelationKernel::gauss(
                cfg.f64("kernel.kappa_amplitude")?,
                cfg.f64("kernel.kappa_scale")?,
                cfg.f64("kernel.kappa_envelope")?,
            )?,
            "const" => CorrelationKernel::constant(cfg.f64("kernel.kappa_value")?)?,
            _ => CorrelationKernel::zero(),
        };
        let init = match cfg.raw("model.init") {
            "uniform" => {
                let a = cfg.f64("model.init_half_width")?;
                InitialLaw::Uniform { lo: -a, hi: a }
            }
            _ => InitialLaw::Gauss { sd: cfg.f64("model.init_sd")? },
        };
        let mode = match cfg.raw("model.motion") {
            "block" => MotionMode::BlockDiagonal {
                threshold: cfg.count("model.block_threshold")?,
                block: cfg.count("model.block_size")?,
            },
            "frozen" => MotionMode::FrozenGrid { spacing: cfg.f64("model.frozen_spacing")? },
            _ => MotionMode::CoupledExact,
        };
        Ok(Self {
            dim,
            n: cfg.count("model.n")?,
            substeps: cfg.count("model.substeps")?,
            horizon: cfg.horizon()?,
            particle_cap: cfg.count("model.particle_cap")?,
            h,
            rho,
            kappa,
            init,
            mode,
        })
    }

    pub fn sim_config(&self, schedule: SnapshotSchedule) -> Result<SimConfig<f64>, RunError> {
        Ok(SimConfig {
            motion: MotionConfig::new(self.n, self.substeps, self.h.clone(), self.rho.clone(), self.mode)?,
            kappa: self.kappa,
            particle_cap: self.particle_cap,
            schedule,
        })
    }

    pub fn horizon_f64(&self) -> f64 {
        superenv::particles::time_to_real(self.horizon)
    }

    /// Kernel description for run metadata.
    pub fn kernel_json(&self, cfg: &ExperimentConfig) -> Value {
        let section: serde_json::Map<String, Value> = crate::config::KEYS
            .iter()
            .filter(|(k, _)| k.starts_with("kernel."))
            .map(|(k, _)| (k["kernel.".len()..].to_string(), Value::String(cfg.raw(k).to_string())))
            .collect();
        json!({
            "settings": section,
            "rho0": self.rho.rho0(),
            "h_l2_norm_sq": self.h.l2_norm_sq(),
            "sobolev_bound": self.h.sobolev_bound(),
            "kappa_sup": self.kappa.sup_norm(),
        })
    }
}
