//! Latent parameterizations: continuous codes `z` that decode to facies.

mod pca;

pub use pca::{pca_fit, PcaModel};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::facies::{FaciesRealization, Grid2D};

/// Codes of an ensemble as the columns of a `latent_dim x N_e` matrix.
pub fn encode_ensemble(
    param: &dyn Parameterization,
    xs: &[FaciesRealization],
    exec: crate::exec::Execution,
) -> Result<DMatrix<f64>> {
    let cols = exec.try_map(xs.len(), |j| param.encode(&xs[j]).map(|z| z.values))?;
    Ok(DMatrix::from_fn(param.latent_dim(), xs.len(), |r, j| cols[j][r]))
}

/// Default threshold for {0,1}-coded continuous fields.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector {
    pub values: Vec<f64>,
    /// Entries map one-to-one onto grid cells.
    pub grid_shaped: bool,
}

impl LatentVector {
    pub fn new(values: Vec<f64>, grid_shaped: bool) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("latent vector has non-finite entries".into()));
        }
        Ok(LatentVector {
            values,
            grid_shaped,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cell becomes channel iff `field > threshold`; ties go to background.
pub fn binarize(grid: &Grid2D, field: &[f64], threshold: f64) -> Result<FaciesRealization> {
    crate::error::check_dim("field", grid.len(), field.len())?;
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("cannot binarize a non-finite field".into()));
    }
    let values = field.iter().map(|&v| u8::from(v > threshold)).collect();
    FaciesRealization::new(*grid, values)
}

/// Maps between facies realizations and latent codes.
pub trait Parameterization: Send + Sync {
    fn name(&self) -> &'static str;

    fn grid(&self) -> &Grid2D;

    fn latent_dim(&self) -> usize;

    fn grid_shaped(&self) -> bool;

    fn encode(&self, x: &FaciesRealization) -> Result<LatentVector>;

    /// Continuous field (one value per cell) for latent code `z`.
    fn decode(&self, z: &[f64]) -> Result<Vec<f64>>;

    fn binarize(&self, field: &[f64]) -> Result<FaciesRealization> {
        binarize(self.grid(), field, BINARY_THRESHOLD)
    }

    /// Binary facies for latent code `z`.
    fn realize(&self, z: &[f64]) -> Result<FaciesRealization> {
        self.binarize(&self.decode(z)?)
    }

    /// Facies code of a single cell for every latent column of `latents`.
    fn realize_cell_batch(&self, latents: &DMatrix<f64>, cell: usize) -> Result<Vec<u8>> {
        (0..latents.ncols())
            .map(|j| {
                let z: Vec<f64> = latents.column(j).iter().copied().collect();
                Ok(self.realize(&z)?.values()[cell])
            })
            .collect()
    }
}

/// The continuous field itself as latent code: `decode(z) = z`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParam {
    grid: Grid2D,
}

impl IdentityParam {
    pub fn new(grid: Grid2D) -> Self {
        IdentityParam { grid }
    }
}

impl Parameterization for IdentityParam {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn latent_dim(&self) -> usize {
        self.grid.len()
    }

    fn grid_shaped(&self) -> bool {
        true
    }

    fn encode(&self, x: &FaciesRealization) -> Result<LatentVector> {
        crate::error::check_dim("realization cells", self.grid.len(), x.values().len())?;
        LatentVector::new(x.as_f64(), true)
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        crate::error::check_dim("latent vector", self.grid.len(), z.len())?;
        Ok(z.to_vec())
    }

    fn realize_cell_batch(&self, latents: &DMatrix<f64>, cell: usize) -> Result<Vec<u8>> {
        crate::error::check_dim("latent rows", self.grid.len(), latents.nrows())?;
        Ok(latents
            .row(cell)
            .iter()
            .map(|&v| u8::from(v > BINARY_THRESHOLD))
            .collect())
    }
}
