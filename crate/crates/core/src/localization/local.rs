use nalgebra::DMatrix;

use super::LocalizationSpec;
use crate::error::{check_dim, Result};
use crate::esmda::{anomalies, ensemble_space_weights, AnalysisInputs, EnsembleState};
use crate::exec::Execution;
use crate::facies::FaciesRealization;
use crate::observation::ObservationSet;
use crate::param::Parameterization;

/// Data sharing one anchor cell, with their ensemble-space products.
struct AnchorGroup {
    anchor: (usize, usize),
    count: usize,
    /// `Aᵀ A` for the group's scaled data anomalies.
    gram: DMatrix<f64>,
    /// `Aᵀ S` with the group's scaled innovations.
    cross: DMatrix<f64>,
}

fn group_by_anchor(obs: &ObservationSet, inputs: &AnalysisInputs) -> Vec<AnchorGroup> {
    let anchors = obs.anchors();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for a in &anchors {
        if !order.contains(a) {
            order.push(*a);
        }
    }
    order
        .into_iter()
        .map(|anchor| {
            let rows: Vec<usize> = (0..anchors.len()).filter(|&l| anchors[l] == anchor).collect();
            let a = inputs.sdd.select_rows(&rows);
            let s = inputs.sinn.select_rows(&rows);
            AnchorGroup {
                anchor,
                count: rows.len(),
                gram: a.transpose() * &a,
                cross: a.transpose() * s,
            }
        })
        .collect()
}

/// One local analysis where every gridblock starts from the shared ensemble
/// latents. Each datum's variance is inflated by `1/ρ` (diagonal `C_e`),
/// the full latent vector is updated, and only that gridblock of the decoded
/// result is kept.
#[allow(clippy::too_many_arguments)]
pub fn local_analysis_update(
    state: &EnsembleState,
    obs: &ObservationSet,
    alpha: f64,
    perturbations: &DMatrix<f64>,
    spec: &LocalizationSpec,
    param: &dyn Parameterization,
    energy: f64,
    exec: Execution,
) -> Result<Vec<FaciesRealization>> {
    let step = local_analysis_step(state, None, obs, alpha, perturbations, spec, param, energy, exec)?;
    Ok(step.facies)
}

/// Result of [`local_analysis_step`].
pub struct LocalStep {
    /// Updated latent ensemble of every gridblock, `N_z x N_e` each.
    pub cell_latents: Vec<DMatrix<f64>>,
    pub facies: Vec<FaciesRealization>,
}

/// Independent ES-MDA analysis per gridblock. Gridblock `c` updates its own
/// latent ensemble `cell_latents[c]` (or the shared `state.latents` when
/// `None`) using only data inside the ellipse centred on it, and keeps
/// gridblock `c` of the decoded result. Gridblocks without data keep their
/// latents.
#[allow(clippy::too_many_arguments)]
pub fn local_analysis_step(
    state: &EnsembleState,
    cell_latents: Option<&[DMatrix<f64>]>,
    obs: &ObservationSet,
    alpha: f64,
    perturbations: &DMatrix<f64>,
    spec: &LocalizationSpec,
    param: &dyn Parameterization,
    energy: f64,
    exec: Execution,
) -> Result<LocalStep> {
    spec.validate()?;
    let inputs = AnalysisInputs::new(&state.latents, &state.predicted, obs, alpha, perturbations)?;
    let groups = group_by_anchor(obs, &inputs);
    let grid = *param.grid();
    let ne = state.ensemble_size();
    if let Some(cl) = cell_latents {
        check_dim("gridblock latent ensembles", grid.len(), cl.len())?;
        for z in cl {
            check_dim("gridblock latent dimension", state.latents.nrows(), z.nrows())?;
            check_dim("gridblock ensemble size", ne, z.ncols())?;
        }
    }

    let cells = exec.try_map(grid.len(), |c| {
        let z0 = cell_latents.map_or(&state.latents, |cl| &cl[c]);
        let here = grid.coords(c);
        let mut g = DMatrix::zeros(ne, ne);
        let mut b = DMatrix::zeros(ne, ne);
        let mut n_data = 0;
        for group in &groups {
            let rho = spec.weight(here, group.anchor);
            if rho > 0.0 {
                g += rho * &group.gram;
                b += rho * &group.cross;
                n_data += group.count;
            }
        }
        let z = if n_data == 0 {
            z0.clone()
        } else {
            let m = ensemble_space_weights(&g, &b, n_data, alpha, energy);
            let own;
            let dz = if cell_latents.is_some() {
                own = anomalies(z0);
                &own
            } else {
                &inputs.dz
            };
            z0 + dz * m
        };
        let values = param.realize_cell_batch(&z, c)?;
        Ok((z, values))
    })?;

    let facies = (0..ne)
        .map(|j| FaciesRealization::new(grid, cells.iter().map(|(_, col)| col[j]).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalStep {
        cell_latents: cells.into_iter().map(|(z, _)| z).collect(),
        facies,
    })
}
