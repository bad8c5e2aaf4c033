use std::fmt::Write as _;

use nalgebra::DMatrix;

use super::{draw_perturbations, esmda_update, EnsembleState, EsmdaConfig};
use crate::error::{check_dim, Error, Result};
use crate::exec::Execution;
use crate::facies::FaciesRealization;
use crate::localization::{local_analysis_step, schur_localized_update, LocalizationSpec};
use crate::metrics::normalized_objective;
use crate::observation::ObservationSet;
use crate::param::Parameterization;

/// `g(x)`: facies realization to predicted data, in observation order.
pub trait ForwardModel: Send + Sync {
    fn predict(&self, x: &FaciesRealization) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateScheme {
    Global,
    Schur(LocalizationSpec),
    /// Per-gridblock analysis; `smooth` re-projects the result through the
    /// parameterization (`realize(encode(x))`).
    LocalAnalysis { spec: LocalizationSpec, smooth: bool },
}

impl UpdateScheme {
    pub const NAMES: [&'static str; 4] = ["none", "schur", "local", "local-smooth"];

    pub fn from_name(name: &str, spec: Option<LocalizationSpec>) -> Result<Self> {
        let need = || {
            spec.ok_or_else(|| Error::config(format!("localizer {name:?} needs an ellipse")))
        };
        match name {
            "none" => Ok(UpdateScheme::Global),
            "schur" => Ok(UpdateScheme::Schur(need()?)),
            "local" => Ok(UpdateScheme::LocalAnalysis {
                spec: need()?,
                smooth: false,
            }),
            "local-smooth" => Ok(UpdateScheme::LocalAnalysis {
                spec: need()?,
                smooth: true,
            }),
            other => Err(Error::config(format!(
                "unknown localizer {other:?}; valid options: {}",
                Self::NAMES.join(", ")
            ))),
        }
    }
}

/// Ensemble trajectory: the prior followed by one state per assimilation.
#[derive(Debug, Clone)]
pub struct HistoryMatch {
    pub states: Vec<EnsembleState>,
    /// `O_N` per state per member.
    pub objectives: Vec<Vec<f64>>,
}

impl HistoryMatch {
    pub fn prior(&self) -> &EnsembleState {
        &self.states[0]
    }

    pub fn posterior(&self) -> &EnsembleState {
        self.states.last().expect("trajectory holds the prior")
    }

    /// CSV with columns `iteration,member,objective`.
    pub fn objective_csv(&self) -> String {
        let mut out = String::from("iteration,member,objective\n");
        for (k, row) in self.objectives.iter().enumerate() {
            for (j, o) in row.iter().enumerate() {
                let _ = writeln!(out, "{k},{j},{o}");
            }
        }
        out
    }
}

fn predict_all(
    forward: &dyn ForwardModel,
    facies: &[FaciesRealization],
    n_data: usize,
    exec: Execution,
) -> Result<DMatrix<f64>> {
    let cols = exec.try_map(facies.len(), |j| {
        let d = forward.predict(&facies[j]).map_err(|e| e.for_member(j))?;
        check_dim("forward model output", n_data, d.len()).map_err(|e| e.for_member(j))?;
        Ok(d)
    })?;
    Ok(DMatrix::from_fn(n_data, facies.len(), |l, j| cols[j][l]))
}

fn realize_all(
    param: &dyn Parameterization,
    latents: &DMatrix<f64>,
    exec: Execution,
) -> Result<Vec<FaciesRealization>> {
    exec.try_map(latents.ncols(), |j| {
        let z: Vec<f64> = latents.column(j).iter().copied().collect();
        param.realize(&z)
    })
}

fn objectives(obs: &ObservationSet, predicted: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (d_obs, sd) = (obs.values(), obs.sd());
    predicted
        .column_iter()
        .map(|c| normalized_objective(&d_obs, c.as_slice(), &sd))
        .collect()
}

/// Decode, simulate and update for every configured assimilation.
pub fn run_history_match(
    prior_latents: &DMatrix<f64>,
    param: &dyn Parameterization,
    forward: &dyn ForwardModel,
    obs: &ObservationSet,
    config: &EsmdaConfig,
    scheme: &UpdateScheme,
    exec: Execution,
) -> Result<HistoryMatch> {
    config.validate()?;
    check_dim("prior ensemble size", config.ensemble_size, prior_latents.ncols())?;
    check_dim("prior latent dimension", param.latent_dim(), prior_latents.nrows())?;
    obs.check_anchors(param.grid())?;
    if matches!(scheme, UpdateScheme::Schur(_)) && !param.grid_shaped() {
        return Err(Error::config(format!(
            "Schur localization needs grid-shaped latents; {} latents are not",
            param.name()
        )));
    }

    let facies = realize_all(param, prior_latents, exec)?;
    let predicted = predict_all(forward, &facies, obs.len(), exec)?;
    let mut states = vec![EnsembleState::new(0, prior_latents.clone(), facies, predicted)?];
    let mut objective_rows = vec![objectives(obs, &states[0].predicted)?];

    // Per-gridblock latent ensembles of the local analysis; `None` means every
    // gridblock shares the state's latents.
    let mut cell_latents: Option<Vec<DMatrix<f64>>> = None;
    for (k, &alpha) in config.alphas.iter().enumerate() {
        let state = states.last().expect("non-empty");
        let e = draw_perturbations(obs, alpha, config.seed, k, config.ensemble_size);
        let (latents, facies) = match scheme {
            UpdateScheme::Global => {
                let z = esmda_update(state, obs, alpha, &e, config.energy)?;
                let x = realize_all(param, &z, exec)?;
                (z, x)
            }
            UpdateScheme::Schur(spec) => {
                let z =
                    schur_localized_update(state, obs, alpha, &e, spec, param.grid(), config.energy)?;
                let x = realize_all(param, &z, exec)?;
                (z, x)
            }
            UpdateScheme::LocalAnalysis { spec, smooth } => {
                let step = local_analysis_step(
                    state,
                    cell_latents.as_deref(),
                    obs,
                    alpha,
                    &e,
                    spec,
                    param,
                    config.energy,
                    exec,
                )?;
                let mut x = step.facies;
                if *smooth {
                    // The smoothed field is realize(encode(x)); every
                    // gridblock restarts from that code.
                    x = exec.try_map(x.len(), |j| param.realize(&param.encode(&x[j])?.values))?;
                    cell_latents = None;
                } else {
                    cell_latents = Some(step.cell_latents);
                }
                // The recorded latents are the encoding of the patched field.
                (crate::param::encode_ensemble(param, &x, exec)?, x)
            }
        };
        let predicted = predict_all(forward, &facies, obs.len(), exec)?;
        objective_rows.push(objectives(obs, &predicted)?);
        states.push(EnsembleState::new(k + 1, latents, facies, predicted)?);
    }
    Ok(HistoryMatch {
        states,
        objectives: objective_rows,
    })
}
