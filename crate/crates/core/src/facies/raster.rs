//! Plain-text raster files: a header line `ni nj`, then `nj` rows of `ni`
//! whitespace-separated values. Values use the shortest round-trip decimal
//! form, so continuous fields survive a write/read cycle bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{FaciesRealization, Grid2D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub ni: usize,
    pub nj: usize,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(ni: usize, nj: usize, values: Vec<f64>) -> Result<Self> {
        crate::error::check_dim("raster values", ni * nj, values.len())?;
        Ok(Raster { ni, nj, values })
    }

    pub fn from_field(grid: &Grid2D, values: &[f64]) -> Result<Self> {
        Raster::new(grid.ni, grid.nj, values.to_vec())
    }

    pub fn from_facies(x: &FaciesRealization) -> Self {
        Raster {
            ni: x.grid().ni,
            nj: x.grid().nj,
            values: x.as_f64(),
        }
    }

    /// Interpret as a binary facies field on `grid`.
    pub fn to_facies(&self, grid: Grid2D) -> Result<FaciesRealization> {
        if grid.ni != self.ni || grid.nj != self.nj {
            return Err(Error::Dimension {
                what: "raster shape vs grid",
                expected: grid.len(),
                got: self.values.len(),
            });
        }
        let values = self
            .values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(0u8)
                } else if v == 1.0 {
                    Ok(1u8)
                } else {
                    Err(Error::config(format!("raster value {v} is not a facies code")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        FaciesRealization::new(grid, values)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 4 + 16);
        let _ = writeln!(out, "{} {}", self.ni, self.nj);
        for row in self.values.chunks(self.ni) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty raster".into(),
        })?;
        let dims: Vec<&str> = header.split_whitespace().collect();
        let parse_dim = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: hline + 1,
                msg: format!("malformed header token {s:?}"),
            })
        };
        if dims.len() != 2 {
            return Err(Error::Parse {
                line: hline + 1,
                msg: format!("header must be `ni nj`, got {header:?}"),
            });
        }
        let (ni, nj) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
        if ni == 0 || nj == 0 {
            return Err(Error::Parse {
                line: hline + 1,
                msg: "raster dimensions must be positive".into(),
            });
        }
        let mut values = Vec::with_capacity(ni * nj);
        for (ln, line) in lines {
            for tok in line.split_whitespace() {
                let v = tok.parse::<f64>().map_err(|_| Error::Parse {
                    line: ln + 1,
                    msg: format!("non-numeric token {tok:?}"),
                })?;
                values.push(v);
            }
        }
        if values.len() != ni * nj {
            return Err(Error::Parse {
                line: hline + 1,
                msg: format!(
                    "header declares {ni}x{nj} = {} values but {} present",
                    ni * nj,
                    values.len()
                ),
            });
        }
        Ok(Raster { ni, nj, values })
    }
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, raster.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Raster::parse(&text)
}
