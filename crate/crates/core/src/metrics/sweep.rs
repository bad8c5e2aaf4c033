use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::facies::{FaciesRealization, Grid2D};
use crate::param::{Parameterization, PcaModel};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSweepConfig {
    pub gammas: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
}

impl Default for PerturbSweepConfig {
    fn default() -> Self {
        PerturbSweepConfig {
            gammas: vec![0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            sample_count: 1000,
            seed: 0,
        }
    }
}

impl PerturbSweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config("sweep gammas must be non-negative and finite"));
        }
        if self.gammas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("sweep gammas must be ascending"));
        }
        if self.sample_count == 0 {
            return Err(Error::config("sweep needs at least one sample"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub gammas: Vec<f64>,
    pub mean_mismatch: Vec<f64>,
    /// `[realization][gamma]` mismatch fractions.
    pub curves: Vec<Vec<f64>>,
}

impl SweepResult {
    /// CSV with columns `gamma,mean_mismatch`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,mean_mismatch\n");
        for (g, m) in self.gammas.iter().zip(&self.mean_mismatch) {
            let _ = writeln!(out, "{g},{m}");
        }
        out
    }
}

/// `C_z^{1/2}` estimated by PCA over latent samples (columns of `latents`).
pub fn latent_sqrt_model(latents: &DMatrix<f64>) -> Result<PcaModel> {
    let grid = Grid2D::new(latents.nrows(), 1, 1.0, 1.0, 1.0)?;
    PcaModel::fit_columns(grid, latents, 1.0)
}

/// Mismatch of `realize(z0 + γ C_z^{1/2} ẑ)` against the γ = 0 reconstruction,
/// with one fixed ẑ per base realization.
pub fn perturbation_sweep(
    param: &dyn Parameterization,
    sqrt_cz: &PcaModel,
    bases: &[FaciesRealization],
    config: &PerturbSweepConfig,
    exec: Execution,
) -> Result<SweepResult> {
    config.validate()?;
    if bases.is_empty() {
        return Err(Error::config("sweep needs at least one base realization"));
    }
    crate::error::check_dim("latent square root dimension", param.latent_dim(), sqrt_cz.dim())?;
    let curves = exec.try_map(bases.len(), |b| {
        let z0 = param.encode(&bases[b])?.values;
        let mut rng = stream_rng(config.seed, "perturbation-sweep", b as u64);
        let zhat: Vec<f64> = (0..z0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let step = sqrt_cz.sqrt_apply(&zhat)?;
        let reference = param.realize(&z0)?;
        config
            .gammas
            .iter()
            .map(|&g| {
                let z: Vec<f64> = z0.iter().zip(step.iter()).map(|(a, s)| a + g * s).collect();
                Ok(param.realize(&z)?.mismatch_fraction(&reference))
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let mean_mismatch = (0..config.gammas.len())
        .map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / curves.len() as f64)
        .collect();
    Ok(SweepResult {
        gammas: config.gammas.clone(),
        mean_mismatch,
        curves,
    })
}
