//! Distance-based localization: Schur-product tapering of the cross
//! covariance and per-gridblock local analysis.

mod local;

pub use local::{local_analysis_step, local_analysis_update, LocalStep};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esmda::{data_space_solve, AnalysisInputs, EnsembleState};
use crate::facies::Grid2D;
use crate::observation::ObservationSet;

/// Rotated ellipse in cell units; the taper reaches zero on its boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationSpec {
    pub half_major_cells: f64,
    pub half_minor_cells: f64,
    /// Major-axis direction, degrees counter-clockwise from the grid x axis.
    pub angle_deg: f64,
}

impl LocalizationSpec {
    pub fn new(half_major_cells: f64, half_minor_cells: f64, angle_deg: f64) -> Result<Self> {
        let s = LocalizationSpec {
            half_major_cells,
            half_minor_cells,
            angle_deg,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_minor_cells > 0.0
            && self.half_major_cells >= self.half_minor_cells
            && self.half_major_cells.is_finite()
            && self.angle_deg.is_finite())
        {
            return Err(Error::config(format!(
                "localization ellipse needs half-axes a >= b > 0, got a = {}, b = {}",
                self.half_major_cells, self.half_minor_cells
            )));
        }
        Ok(())
    }

    /// Taper weight between two cells.
    pub fn weight(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        gaspari_cohn(elliptical_distance(a, b, self)).unwrap_or(0.0)
    }
}

/// Gaspari-Cohn fifth-order compactly supported correlation, support `[0, 2]`.
pub fn gaspari_cohn(r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::config(format!("taper distance must be non-negative, got {r}")));
    }
    let v = if r <= 1.0 {
        1.0 - 5.0 / 3.0 * r.powi(2) + 5.0 / 8.0 * r.powi(3) + 0.5 * r.powi(4) - 0.25 * r.powi(5)
    } else if r < 2.0 {
        4.0 - 5.0 * r + 5.0 / 3.0 * r.powi(2) + 5.0 / 8.0 * r.powi(3) - 0.5 * r.powi(4)
            + r.powi(5) / 12.0
            - 2.0 / (3.0 * r)
    } else {
        0.0
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Offset rotated into the ellipse frame and scaled so the boundary is r = 2.
pub fn elliptical_distance(a: (usize, usize), b: (usize, usize), spec: &LocalizationSpec) -> f64 {
    let dx = b.0 as f64 - a.0 as f64;
    let dy = b.1 as f64 - a.1 as f64;
    let (s, c) = spec.angle_deg.to_radians().sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    2.0 * ((u / spec.half_major_cells).powi(2) + (v / spec.half_minor_cells).powi(2)).sqrt()
}

/// `R[cell, datum]` between every grid cell and every datum anchor.
pub fn schur_taper(grid: &Grid2D, anchors: &[(usize, usize)], spec: &LocalizationSpec) -> DMatrix<f64> {
    DMatrix::from_fn(grid.len(), anchors.len(), |k, l| {
        spec.weight(grid.coords(k), anchors[l])
    })
}

/// Sum of taper weights over the data for each cell, for inspection.
pub fn taper_row_sums(grid: &Grid2D, anchors: &[(usize, usize)], spec: &LocalizationSpec) -> Vec<f64> {
    (0..grid.len())
        .map(|k| {
            let c = grid.coords(k);
            anchors.iter().map(|&a| spec.weight(c, a)).sum()
        })
        .collect()
}

/// ES-MDA update with the cross covariance replaced by `R ∘ C_zd`.
pub fn schur_localized_update(
    state: &EnsembleState,
    obs: &ObservationSet,
    alpha: f64,
    perturbations: &DMatrix<f64>,
    spec: &LocalizationSpec,
    grid: &Grid2D,
    energy: f64,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if state.latents.nrows() != grid.len() {
        return Err(Error::config(format!(
            "Schur localization needs grid-shaped latents ({} entries), got {}",
            grid.len(),
            state.latents.nrows()
        )));
    }
    let inputs = AnalysisInputs::new(&state.latents, &state.predicted, obs, alpha, perturbations)?;
    let mut czd = inputs.scaled_cross_covariance();
    czd.component_mul_assign(&schur_taper(grid, &obs.anchors(), spec));
    let x = data_space_solve(&inputs.sdd, &inputs.sinn, alpha, energy)?;
    Ok(&state.latents + czd * x)
}
