//! Grid geometry, binary facies fields and their two-channel indicator form.

mod prior;
mod raster;

pub use prior::{generate_channel_masks, generate_prior, generate_prior_from, ChannelPriorConfig, Range};
pub use raster::{read_raster, write_raster, Raster};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const BACKGROUND: u8 = 0;
pub const CHANNEL: u8 = 1;

/// Regular 2D Cartesian grid. Cells are indexed row-major: `k = j * ni + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub ni: usize,
    pub nj: usize,
    /// Cell size along x, meters.
    pub dx: f64,
    /// Cell size along y, meters.
    pub dy: f64,
    /// Layer thickness, meters.
    pub thickness: f64,
}

impl Grid2D {
    pub fn new(ni: usize, nj: usize, dx: f64, dy: f64, thickness: f64) -> Result<Self> {
        let g = Grid2D {
            ni,
            nj,
            dx,
            dy,
            thickness,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid with 100 m square cells and 25 m thickness.
    pub fn square(ni: usize, nj: usize) -> Self {
        Grid2D {
            ni,
            nj,
            dx: 100.0,
            dy: 100.0,
            thickness: 25.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ni == 0 || self.nj == 0 {
            return Err(Error::config(format!(
                "grid must have at least one cell per axis, got {}x{}",
                self.ni, self.nj
            )));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.dx) && positive(self.dy) && positive(self.thickness)) {
            return Err(Error::config("grid cell sizes and thickness must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ni * self.nj
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.ni && j < self.nj);
        j * self.ni + i
    }

    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.ni, k / self.ni)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.ni && j < self.nj
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.ni == other.ni && self.nj == other.nj
    }

    /// Indices of the 4-neighbours of cell `k`.
    pub fn neighbors4(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = self.coords(k);
        let cand = [
            (i.checked_sub(1), Some(j)),
            (Some(i + 1), Some(j)),
            (Some(i), j.checked_sub(1)),
            (Some(i), Some(j + 1)),
        ];
        cand.into_iter().filter_map(move |(ci, cj)| match (ci, cj) {
            (Some(ci), Some(cj)) if self.contains(ci, cj) => Some(self.index(ci, cj)),
            _ => None,
        })
    }
}

/// Binary facies field: 0 background, 1 channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FaciesRealization {
    grid: Grid2D,
    values: Vec<u8>,
}

impl FaciesRealization {
    pub fn new(grid: Grid2D, values: Vec<u8>) -> Result<Self> {
        check_dim("facies values", grid.len(), values.len())?;
        if let Some(bad) = values.iter().find(|&&v| v > CHANNEL) {
            return Err(Error::config(format!("facies code {bad} is not binary")));
        }
        Ok(FaciesRealization { grid, values })
    }

    pub fn filled(grid: Grid2D, code: u8) -> Self {
        assert!(code <= CHANNEL);
        FaciesRealization {
            grid,
            values: vec![code; grid.len()],
        }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.values[self.grid.index(i, j)]
    }

    pub fn set(&mut self, k: usize, code: u8) {
        assert!(code <= CHANNEL);
        self.values[k] = code;
    }

    pub fn channel_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v == CHANNEL).count() as f64 / self.values.len() as f64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Number of cells where the two realizations disagree.
    pub fn hamming(&self, other: &FaciesRealization) -> usize {
        self.values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub fn mismatch_fraction(&self, other: &FaciesRealization) -> f64 {
        self.hamming(other) as f64 / self.values.len() as f64
    }

    /// Cells whose every 4-neighbour carries the other facies.
    pub fn isolated_cells(&self) -> usize {
        (0..self.values.len())
            .filter(|&k| {
                let mut n = self.grid.neighbors4(k).peekable();
                n.peek().is_some() && n.all(|m| self.values[m] != self.values[k])
            })
            .count()
    }
}

/// Two-channel indicator image: plane `c` holds 1 where the facies code is `c`.
/// Stored channel-major, `[plane 0 | plane 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorField {
    pub grid: Grid2D,
    pub data: Vec<f64>,
}

impl IndicatorField {
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }
}

pub fn facies_to_channels(x: &FaciesRealization) -> IndicatorField {
    let n = x.grid.len();
    let mut data = vec![0.0; 2 * n];
    for (k, &v) in x.values.iter().enumerate() {
        data[v as usize * n + k] = 1.0;
    }
    IndicatorField { grid: x.grid, data }
}

/// Inverse of [`facies_to_channels`]; rejects fields that are not one-hot per cell.
pub fn channels_to_facies(field: &IndicatorField) -> Result<FaciesRealization> {
    let n = field.grid.len();
    check_dim("indicator field", 2 * n, field.data.len())?;
    let values = (0..n)
        .map(|k| match (field.data[k], field.data[n + k]) {
            (a, b) if a == 1.0 && b == 0.0 => Ok(BACKGROUND),
            (a, b) if a == 0.0 && b == 1.0 => Ok(CHANNEL),
            (a, b) => Err(Error::config(format!(
                "cell {k} is not a valid indicator pair ({a}, {b})"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    FaciesRealization::new(field.grid, values)
}
