//! Grid-shaped PCA with a symmetric square root.
//!
//! The model stores the thin SVD `Y = U Σ Vᵀ` of the centered training matrix
//! scaled by `1/√(N−1)`, so `U Σ² Uᵀ` is the sample covariance. Latent codes
//! live on the full grid: `decode(z) = mean + U Σ Uᵀ z`, i.e. the symmetric
//! square root of the covariance applied to `z`.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{LatentVector, Parameterization, BINARY_THRESHOLD};
use crate::error::{check_dim, Error, Result};
use crate::facies::{FaciesRealization, Grid2D};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug)]
pub struct PcaModel {
    grid: Grid2D,
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    singular_values: DVector<f64>,
    energy_kept: f64,
    dense_sqrt: OnceLock<DMatrix<f64>>,
}

impl Clone for PcaModel {
    fn clone(&self) -> Self {
        PcaModel {
            grid: self.grid,
            mean: self.mean.clone(),
            basis: self.basis.clone(),
            singular_values: self.singular_values.clone(),
            energy_kept: self.energy_kept,
            dense_sqrt: OnceLock::new(),
        }
    }
}

impl PartialEq for PcaModel {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.mean == other.mean
            && self.basis == other.basis
            && self.singular_values == other.singular_values
    }
}

/// Fit on binary training realizations.
pub fn pca_fit(training: &[FaciesRealization], energy_kept: f64) -> Result<PcaModel> {
    let first = training
        .first()
        .ok_or_else(|| Error::config("PCA needs at least 2 training realizations, got 0"))?;
    let grid = *first.grid();
    if let Some(bad) = training.iter().find(|x| !x.grid().same_shape(&grid)) {
        return Err(Error::Dimension {
            what: "training realization grid",
            expected: grid.len(),
            got: bad.grid().len(),
        });
    }
    let n = grid.len();
    let data = DMatrix::from_fn(n, training.len(), |i, j| training[j].values()[i] as f64);
    PcaModel::fit_columns(grid, &data, energy_kept)
}

impl PcaModel {
    /// Fit on arbitrary continuous samples stored as the columns of `data`.
    pub fn fit_columns(grid: Grid2D, data: &DMatrix<f64>, energy_kept: f64) -> Result<PcaModel> {
        let (nx, ns) = data.shape();
        check_dim("sample length", grid.len(), nx)?;
        if ns < 2 {
            return Err(Error::config(format!(
                "PCA needs at least 2 training samples, got {ns}"
            )));
        }
        if !(energy_kept > 0.0 && energy_kept <= 1.0) {
            return Err(Error::config(format!(
                "energy_kept must lie in (0, 1], got {energy_kept}"
            )));
        }
        let mean = data.column_mean();
        let mut y = data.clone();
        let scale = 1.0 / ((ns - 1) as f64).sqrt();
        for mut col in y.column_iter_mut() {
            col -= &mean;
            col *= scale;
        }

        let (mut sigma, mut basis) = if ns <= nx {
            // Snapshot route through the small Gram matrix.
            let eig = SymmetricEigen::new(y.transpose() * &y);
            let order = descending(&eig.eigenvalues);
            let sigma: Vec<f64> = order
                .iter()
                .map(|&k| eig.eigenvalues[k].max(0.0).sqrt())
                .collect();
            let v = DMatrix::from_fn(ns, order.len(), |i, c| eig.eigenvectors[(i, order[c])]);
            (sigma, &y * v)
        } else {
            let eig = SymmetricEigen::new(&y * y.transpose());
            let order = descending(&eig.eigenvalues);
            let sigma: Vec<f64> = order
                .iter()
                .map(|&k| eig.eigenvalues[k].max(0.0).sqrt())
                .collect();
            let u = DMatrix::from_fn(nx, order.len(), |i, c| eig.eigenvectors[(i, order[c])]);
            (sigma, u)
        };

        let top = sigma.first().copied().unwrap_or(0.0);
        let mut rank = if top > 0.0 {
            sigma.iter().take_while(|&&s| s >= RANK_TOLERANCE * top).count()
        } else {
            0
        };
        rank = rank.min(ns - 1);
        let total: f64 = sigma[..rank].iter().map(|s| s * s).sum();
        let mut cum = 0.0;
        let mut keep = 0;
        for s in &sigma[..rank] {
            if keep > 0 && cum >= energy_kept * total * (1.0 - 1e-12) {
                break;
            }
            cum += s * s;
            keep += 1;
        }
        sigma.truncate(keep);
        basis = basis.columns(0, keep).into_owned();
        if ns <= nx {
            for (c, s) in sigma.iter().enumerate() {
                let mut col = basis.column_mut(c);
                col /= *s;
            }
            basis = reorthonormalize(basis);
        }

        Ok(PcaModel {
            grid,
            mean,
            basis,
            singular_values: DVector::from_vec(sigma),
            energy_kept,
            dense_sqrt: OnceLock::new(),
        })
    }

    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn energy_kept(&self) -> f64 {
        self.energy_kept
    }

    /// `U Σ Uᵀ v`: the symmetric square root of the covariance applied to `v`.
    pub fn sqrt_apply(&self, v: &[f64]) -> Result<DVector<f64>> {
        check_dim("latent vector", self.dim(), v.len())?;
        let v = DVector::from_column_slice(v);
        let mut coeff = self.basis.tr_mul(&v);
        coeff.component_mul_assign(&self.singular_values);
        Ok(&self.basis * coeff)
    }

    /// Dense `U Σ Uᵀ`, built on first use.
    pub fn sqrt_matrix(&self) -> &DMatrix<f64> {
        self.dense_sqrt.get_or_init(|| {
            let mut scaled = self.basis.clone();
            for (c, s) in self.singular_values.iter().enumerate() {
                let mut col = scaled.column_mut(c);
                col *= *s;
            }
            scaled * self.basis.transpose()
        })
    }

    pub fn decode_vec(&self, z: &[f64]) -> Result<DVector<f64>> {
        Ok(&self.mean + self.sqrt_apply(z)?)
    }

    /// `U Σ⁻¹ Uᵀ (x − mean)` for a continuous field.
    pub fn encode_field(&self, field: &[f64]) -> Result<LatentVector> {
        check_dim("field", self.dim(), field.len())?;
        if self.rank() == 0 {
            return Err(Error::Numerical("cannot encode with a rank-0 PCA model".into()));
        }
        let centered = DVector::from_column_slice(field) - &self.mean;
        let mut coeff = self.basis.tr_mul(&centered);
        coeff.component_div_assign(&self.singular_values);
        LatentVector::new((&self.basis * coeff).as_slice().to_vec(), true)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.dim(), self.rank());
        let g = &self.grid;
        let _ = writeln!(
            out,
            "grid {} {} {} {} {} energy {}",
            g.ni, g.nj, g.dx, g.dy, g.thickness, self.energy_kept
        );
        let line = |out: &mut String, vals: &mut dyn Iterator<Item = f64>| {
            let mut first = true;
            for v in vals {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        };
        line(&mut out, &mut self.mean.iter().copied());
        line(&mut out, &mut self.singular_values.iter().copied());
        for c in 0..self.rank() {
            line(&mut out, &mut self.basis.column(c).iter().copied());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<PcaModel> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing {what}"),
            })
        };
        let perr = |line: usize, msg: String| Error::Parse { line: line + 1, msg };
        let nums = |line: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| perr(line, format!("non-numeric token {t:?}")))
                })
                .collect()
        };

        let (l0, header) = next("header")?;
        let h = nums(l0, header)?;
        if h.len() != 2 {
            return Err(perr(l0, "header must be `N_x r`".into()));
        }
        let (nx, r) = (h[0] as usize, h[1] as usize);

        let (l1, gline) = next("grid line")?;
        let toks: Vec<&str> = gline.split_whitespace().collect();
        if toks.len() != 8 || toks[0] != "grid" || toks[6] != "energy" {
            return Err(perr(l1, "expected `grid ni nj dx dy thickness energy e`".into()));
        }
        let gv = nums(l1, &format!("{} {} {} {} {} {}", toks[1], toks[2], toks[3], toks[4], toks[5], toks[7]))?;
        let grid = Grid2D::new(gv[0] as usize, gv[1] as usize, gv[2], gv[3], gv[4])?;
        check_dim("PCA grid", nx, grid.len())?;

        let (lm, mline) = next("mean")?;
        let mean = nums(lm, mline)?;
        check_dim("PCA mean", nx, mean.len())?;
        let (ls, sline) = next("singular values")?;
        let sv = nums(ls, sline)?;
        check_dim("PCA singular values", r, sv.len())?;
        let mut basis = DMatrix::zeros(nx, r);
        for c in 0..r {
            let (lb, bline) = next("basis column")?;
            let col = nums(lb, bline)?;
            check_dim("PCA basis column", nx, col.len())?;
            basis.column_mut(c).copy_from_slice(&col);
        }
        Ok(PcaModel {
            grid,
            mean: DVector::from_vec(mean),
            basis,
            singular_values: DVector::from_vec(sv),
            energy_kept: gv[5],
            dense_sqrt: OnceLock::new(),
        })
    }
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

/// Modified Gram-Schmidt, two passes; column signs and order are preserved.
fn reorthonormalize(mut u: DMatrix<f64>) -> DMatrix<f64> {
    for _ in 0..2 {
        for c in 0..u.ncols() {
            for p in 0..c {
                let proj = u.column(p).dot(&u.column(c));
                let prev = u.column(p).clone_owned();
                u.column_mut(c).axpy(-proj, &prev, 1.0);
            }
            let norm = u.column(c).norm();
            if norm > 0.0 {
                u.column_mut(c).unscale_mut(norm);
            }
        }
    }
    u
}

impl Parameterization for PcaModel {
    fn name(&self) -> &'static str {
        "pca"
    }

    fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn latent_dim(&self) -> usize {
        self.dim()
    }

    fn grid_shaped(&self) -> bool {
        true
    }

    fn encode(&self, x: &FaciesRealization) -> Result<LatentVector> {
        if !x.grid().same_shape(&self.grid) {
            return Err(Error::Dimension {
                what: "realization grid",
                expected: self.grid.len(),
                got: x.grid().len(),
            });
        }
        self.encode_field(&x.as_f64())
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_vec(z)?.as_slice().to_vec())
    }

    fn realize_cell_batch(&self, latents: &DMatrix<f64>, cell: usize) -> Result<Vec<u8>> {
        check_dim("latent rows", self.dim(), latents.nrows())?;
        let row = self.sqrt_matrix().row(cell);
        let vals = row * latents;
        Ok(vals
            .iter()
            .map(|v| u8::from(self.mean[cell] + v > BINARY_THRESHOLD))
            .collect())
    }
}
