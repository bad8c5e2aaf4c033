//! ES-MDA analysis: inflation schedule, ensemble statistics and the
//! latent-space update, plus the iteration driver.

mod run;

pub use run::{run_history_match, ForwardModel, HistoryMatch, UpdateScheme};

use nalgebra::{DMatrix, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::facies::FaciesRealization;
use crate::observation::ObservationSet;
use crate::rng::stream_rng;

pub const DEFAULT_ENERGY: f64 = 0.999;
const INFLATION_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsmdaConfig {
    /// Inflation coefficients, one per assimilation.
    pub alphas: Vec<f64>,
    pub ensemble_size: usize,
    /// Eigenvalue energy kept in the data-space inverse.
    #[serde(default = "default_energy")]
    pub energy: f64,
    pub seed: u64,
}

fn default_energy() -> f64 {
    DEFAULT_ENERGY
}

impl EsmdaConfig {
    /// Constant inflation `alpha_k = n_assimilations`.
    pub fn constant(n_assimilations: usize, ensemble_size: usize, seed: u64) -> Result<Self> {
        let c = EsmdaConfig {
            alphas: inflation_schedule(n_assimilations)?,
            ensemble_size,
            energy: DEFAULT_ENERGY,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn n_assimilations(&self) -> usize {
        self.alphas.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_inflation(&self.alphas)?;
        if self.ensemble_size < 2 {
            return Err(Error::config(format!(
                "ensemble size must be at least 2, got {}",
                self.ensemble_size
            )));
        }
        if !(self.energy > 0.0 && self.energy <= 1.0) {
            return Err(Error::config(format!(
                "energy cutoff must lie in (0, 1], got {}",
                self.energy
            )));
        }
        Ok(())
    }
}

pub fn inflation_schedule(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("number of assimilations must be at least 1"));
    }
    Ok(vec![n as f64; n])
}

/// Positive coefficients whose reciprocals sum to one.
pub fn check_inflation(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::config("inflation schedule is empty"));
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::config(format!("inflation coefficient {a} is not positive")));
    }
    let sum: f64 = alphas.iter().map(|a| 1.0 / a).sum();
    if (sum - 1.0).abs() > INFLATION_TOL {
        return Err(Error::config(format!(
            "inflation coefficients must satisfy sum(1/alpha) = 1, got {sum:.12}"
        )));
    }
    Ok(())
}

/// `e_j ~ N(0, alpha C_e)`, one column per member. Member `j` of iteration
/// `k` always reads the same substream.
pub fn draw_perturbations(
    obs: &ObservationSet,
    alpha: f64,
    seed: u64,
    iteration: usize,
    ensemble_size: usize,
) -> DMatrix<f64> {
    let sd = obs.sd();
    let scale = alpha.sqrt();
    let mut e = DMatrix::zeros(sd.len(), ensemble_size);
    for j in 0..ensemble_size {
        let mut rng = stream_rng(seed, "esmda-perturbation", ((iteration as u64) << 32) | j as u64);
        for (l, s) in sd.iter().enumerate() {
            let xi: f64 = StandardNormal.sample(&mut rng);
            e[(l, j)] = scale * s * xi;
        }
    }
    e
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    pub iteration: usize,
    /// `N_z x N_e`.
    pub latents: DMatrix<f64>,
    pub facies: Vec<FaciesRealization>,
    /// `N_d x N_e`.
    pub predicted: DMatrix<f64>,
}

impl EnsembleState {
    pub fn new(
        iteration: usize,
        latents: DMatrix<f64>,
        facies: Vec<FaciesRealization>,
        predicted: DMatrix<f64>,
    ) -> Result<Self> {
        check_dim("facies count", latents.ncols(), facies.len())?;
        check_dim("predicted data columns", latents.ncols(), predicted.ncols())?;
        Ok(EnsembleState {
            iteration,
            latents,
            facies,
            predicted,
        })
    }

    pub fn ensemble_size(&self) -> usize {
        self.latents.ncols()
    }
}

/// Column anomalies scaled by `1/sqrt(N_e - 1)`.
pub fn anomalies(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.ncols();
    let mean = m.column_mean();
    let scale = 1.0 / ((n.max(2) - 1) as f64).sqrt();
    let mut a = m.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
        col *= scale;
    }
    a
}

/// Ensemble quantities of one analysis, with data scaled by `C_e^{-1/2}`.
pub struct AnalysisInputs {
    /// Latent anomalies `ΔZ`.
    pub dz: DMatrix<f64>,
    /// `C_e^{-1/2} ΔD`.
    pub sdd: DMatrix<f64>,
    /// `C_e^{-1/2} (d_obs + e_j - d_j)`.
    pub sinn: DMatrix<f64>,
}

impl AnalysisInputs {
    pub fn new(
        latents: &DMatrix<f64>,
        predicted: &DMatrix<f64>,
        obs: &ObservationSet,
        alpha: f64,
        perturbations: &DMatrix<f64>,
    ) -> Result<Self> {
        let ne = latents.ncols();
        if ne < 2 {
            return Err(Error::config("an analysis needs at least two members"));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!("inflation coefficient {alpha} is not positive")));
        }
        check_dim("predicted data columns", ne, predicted.ncols())?;
        check_dim("predicted data rows", obs.len(), predicted.nrows())?;
        check_dim("perturbation rows", obs.len(), perturbations.nrows())?;
        check_dim("perturbation columns", ne, perturbations.ncols())?;
        if predicted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("predicted data contain non-finite values".into()));
        }
        let inv_sd: Vec<f64> = obs.sd().iter().map(|s| 1.0 / s).collect();
        let d_obs = obs.values();
        let mut sdd = anomalies(predicted);
        let mut sinn = perturbations - predicted;
        for l in 0..obs.len() {
            sdd.row_mut(l).scale_mut(inv_sd[l]);
            for j in 0..ne {
                sinn[(l, j)] = (sinn[(l, j)] + d_obs[l]) * inv_sd[l];
            }
        }
        Ok(AnalysisInputs {
            dz: anomalies(latents),
            sdd,
            sinn,
        })
    }

    /// `C_zd C_e^{-1/2}`, `N_z x N_d`.
    pub fn scaled_cross_covariance(&self) -> DMatrix<f64> {
        &self.dz * self.sdd.transpose()
    }
}

/// Number of leading eigenvalues (sorted descending) holding `energy` of the total.
pub fn truncation_rank(sorted_desc: &[f64], energy: f64) -> usize {
    let total: f64 = sorted_desc.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, v) in sorted_desc.iter().enumerate() {
        acc += v;
        if acc >= energy * total * (1.0 - 1e-15) {
            return k + 1;
        }
    }
    sorted_desc.len()
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// `X = (C̃_dd + alpha I)^+ sinn` with `C̃_dd = sdd sddᵀ`, the pseudo-inverse
/// keeping `energy` of the eigenvalue sum. Then `Δz = C_zd C_e^{-1/2} X`.
pub fn data_space_solve(
    sdd: &DMatrix<f64>,
    sinn: &DMatrix<f64>,
    alpha: f64,
    energy: f64,
) -> Result<DMatrix<f64>> {
    let nd = sdd.nrows();
    let mut c = sdd * sdd.transpose();
    for l in 0..nd {
        c[(l, l)] += alpha;
    }
    let (values, vectors) = sorted_eigen(c);
    let keep = truncation_rank(&values, energy);
    let v = vectors.columns(0, keep);
    let mut proj = v.transpose() * sinn;
    for (k, mut row) in proj.row_iter_mut().enumerate() {
        row /= values[k];
    }
    Ok(v * proj)
}

/// Ensemble-space weights `M` with `Δz = ΔZ M` for a data subset described by
/// `g = Ãᵀ Ã` and `b = Ãᵀ S̃`, where `Ã` (`n_data x N_e`) are the scaled,
/// tapered data anomalies and `S̃` the matching innovations. The truncation
/// follows the same rule as [`data_space_solve`] on the `n_data` spectrum.
pub fn ensemble_space_weights(
    g: &DMatrix<f64>,
    b: &DMatrix<f64>,
    n_data: usize,
    alpha: f64,
    energy: f64,
) -> DMatrix<f64> {
    let ne = g.nrows();
    let (values, vectors) = sorted_eigen(g.clone());
    let m = n_data.min(ne);
    let mut spectrum: Vec<f64> = values[..m].iter().map(|v| v + alpha).collect();
    spectrum.extend(std::iter::repeat_n(alpha, n_data - m));
    let keep = truncation_rank(&spectrum, energy).min(m);
    let v = vectors.columns(0, keep);
    let mut proj = v.transpose() * b;
    for (k, mut row) in proj.row_iter_mut().enumerate() {
        row /= spectrum[k];
    }
    v * proj
}

/// ES-MDA analysis applied to every member; returns the updated latent matrix.
pub fn update_latents(
    latents: &DMatrix<f64>,
    predicted: &DMatrix<f64>,
    obs: &ObservationSet,
    alpha: f64,
    perturbations: &DMatrix<f64>,
    energy: f64,
) -> Result<DMatrix<f64>> {
    let inputs = AnalysisInputs::new(latents, predicted, obs, alpha, perturbations)?;
    let x = data_space_solve(&inputs.sdd, &inputs.sinn, alpha, energy)?;
    let (nz, nd, ne) = (latents.nrows(), obs.len(), latents.ncols());
    // Same product, grouped to avoid an N_e x N_e or N_z x N_d intermediate
    // whichever is larger.
    let delta = if nz * nd <= ne * ne {
        inputs.scaled_cross_covariance() * x
    } else {
        &inputs.dz * (inputs.sdd.transpose() * x)
    };
    Ok(latents + delta)
}

pub fn esmda_update(
    state: &EnsembleState,
    obs: &ObservationSet,
    alpha: f64,
    perturbations: &DMatrix<f64>,
    energy: f64,
) -> Result<DMatrix<f64>> {
    update_latents(&state.latents, &state.predicted, obs, alpha, perturbations, energy)
}

#[cfg(test)]
mod tests;
