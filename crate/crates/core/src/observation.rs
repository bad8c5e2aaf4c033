//! Observed data with per-datum error and spatial anchor.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::facies::Grid2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    WaterCut,
    WaterInjectionRate,
    Facies,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::WaterCut => "water_cut",
            Quantity::WaterInjectionRate => "water_injection_rate",
            Quantity::Facies => "facies",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "water_cut" => Some(Quantity::WaterCut),
            "water_injection_rate" => Some(Quantity::WaterInjectionRate),
            "facies" => Some(Quantity::Facies),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datum {
    pub time_days: f64,
    pub well: String,
    pub quantity: Quantity,
    pub value: f64,
    pub sd: f64,
    /// Cell `(i, j)` the datum is attached to.
    pub anchor: (usize, usize),
}

/// `d_obs` with a diagonal error covariance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationSet {
    pub data: Vec<Datum>,
}

impl ObservationSet {
    pub fn new(data: Vec<Datum>) -> Result<Self> {
        for (k, d) in data.iter().enumerate() {
            if !(d.sd > 0.0 && d.sd.is_finite()) {
                return Err(Error::config(format!(
                    "datum {k} ({} {}) has non-positive sd {}",
                    d.well,
                    d.quantity.as_str(),
                    d.sd
                )));
            }
            if !d.value.is_finite() {
                return Err(Error::config(format!("datum {k} has a non-finite value")));
            }
        }
        Ok(ObservationSet { data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.data.iter().map(|d| d.value).collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.data.iter().map(|d| d.sd).collect()
    }

    pub fn anchors(&self) -> Vec<(usize, usize)> {
        self.data.iter().map(|d| d.anchor).collect()
    }

    pub fn check_anchors(&self, grid: &Grid2D) -> Result<()> {
        match self.data.iter().find(|d| !grid.contains(d.anchor.0, d.anchor.1)) {
            Some(d) => Err(Error::config(format!(
                "datum anchor {:?} of well {} lies outside the {}x{} grid",
                d.anchor, d.well, grid.ni, grid.nj
            ))),
            None => Ok(()),
        }
    }

    /// CSV with columns `time_days,well,quantity,value,sd`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_days,well,quantity,value,sd\n");
        for d in &self.data {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                d.time_days,
                d.well,
                d.quantity.as_str(),
                d.value,
                d.sd
            );
        }
        out
    }

    /// Parse the CSV form; anchors are resolved through `anchor_of(well)`.
    pub fn from_csv(
        text: &str,
        anchor_of: impl Fn(&str) -> Option<(usize, usize)>,
    ) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "time_days,well,quantity,value,sd" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "expected header time_days,well,quantity,value,sd".into(),
                })
            }
        }
        let mut data = Vec::new();
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let perr = |msg: String| Error::Parse { line: ln + 1, msg };
            if f.len() != 5 {
                return Err(perr(format!("expected 5 fields, got {}", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| perr(format!("non-numeric field {s:?}")))
            };
            let quantity =
                Quantity::parse(f[2]).ok_or_else(|| perr(format!("unknown quantity {:?}", f[2])))?;
            let anchor = anchor_of(f[1]).ok_or_else(|| perr(format!("unknown well {:?}", f[1])))?;
            data.push(Datum {
                time_days: num(f[0])?,
                well: f[1].to_string(),
                quantity,
                value: num(f[3])?,
                sd: num(f[4])?,
                anchor,
            });
        }
        ObservationSet::new(data)
    }

    /// Same data with values replaced, keeping order and metadata.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        check_dim("observation values", self.len(), values.len())?;
        let mut out = self.clone();
        for (d, &v) in out.data.iter_mut().zip(values) {
            d.value = v;
        }
        Ok(out)
    }
}
