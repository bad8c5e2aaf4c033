//! Forward models: the hard-data observation operator and a compact
//! incompressible oil-water simulator.

mod impes;
mod pcg;

pub use impes::{simulate, simulate_with_diagnostics, Diagnostics};
pub use pcg::{solve_pcg, FivePoint};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esmda::ForwardModel;
use crate::facies::{FaciesRealization, Grid2D};
use crate::observation::{Datum, ObservationSet, Quantity};
use crate::rng::stream_rng;

pub const MILLIDARCY: f64 = 9.869233e-16;
pub const CENTIPOISE: f64 = 1e-3;
pub const BAR: f64 = 1e5;
pub const DAY: f64 = 86_400.0;
pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WellKind {
    Producer,
    Injector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    pub name: String,
    pub i: usize,
    pub j: usize,
    pub kind: WellKind,
    pub bhp_bar: f64,
}

impl WellSpec {
    pub fn producer(name: &str, i: usize, j: usize, bhp_bar: f64) -> Self {
        WellSpec {
            name: name.into(),
            i,
            j,
            kind: WellKind::Producer,
            bhp_bar,
        }
    }

    pub fn injector(name: &str, i: usize, j: usize, bhp_bar: f64) -> Self {
        WellSpec {
            name: name.into(),
            i,
            j,
            kind: WellKind::Injector,
            bhp_bar,
        }
    }

    pub fn cell(&self) -> (usize, usize) {
        (self.i, self.j)
    }

    pub fn quantity(&self) -> Quantity {
        match self.kind {
            WellKind::Producer => Quantity::WaterCut,
            WellKind::Injector => Quantity::WaterInjectionRate,
        }
    }
}

pub fn check_wells_on_grid(wells: &[WellSpec], grid: &Grid2D) -> Result<()> {
    for w in wells {
        if !grid.contains(w.i, w.j) {
            return Err(Error::config(format!(
                "well {} at ({}, {}) lies outside the {}x{} grid",
                w.name, w.i, w.j, grid.ni, grid.nj
            )));
        }
    }
    Ok(())
}

/// Check a production deck: wells on the grid, unique names, at least one
/// producer and one injector, and no producer above any injector's BHP.
pub fn validate_deck(wells: &[WellSpec], grid: &Grid2D) -> Result<()> {
    check_wells_on_grid(wells, grid)?;
    for (k, w) in wells.iter().enumerate() {
        if wells[..k].iter().any(|o| o.name == w.name) {
            return Err(Error::config(format!("duplicate well name {}", w.name)));
        }
        if !(w.bhp_bar.is_finite() && w.bhp_bar > 0.0) {
            return Err(Error::config(format!("well {} needs a positive BHP", w.name)));
        }
        if w.name.contains(',') || w.name.trim().is_empty() {
            return Err(Error::config(format!("invalid well name {:?}", w.name)));
        }
    }
    let max_prod = wells
        .iter()
        .filter(|w| w.kind == WellKind::Producer)
        .map(|w| w.bhp_bar)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_inj = wells
        .iter()
        .filter(|w| w.kind == WellKind::Injector)
        .map(|w| w.bhp_bar)
        .fold(f64::INFINITY, f64::min);
    if max_prod == f64::NEG_INFINITY || min_inj == f64::INFINITY {
        return Err(Error::config("deck needs at least one producer and one injector"));
    }
    if max_prod > min_inj {
        return Err(Error::config(format!(
            "producer BHP {max_prod} bar exceeds injector BHP {min_inj} bar"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FluidRockConfig {
    pub perm_channel_md: f64,
    pub perm_background_md: f64,
    pub porosity: f64,
    pub viscosity_water_cp: f64,
    pub viscosity_oil_cp: f64,
    pub corey_water: f64,
    pub corey_oil: f64,
    pub initial_water_saturation: f64,
    pub well_radius_m: f64,
}

impl Default for FluidRockConfig {
    fn default() -> Self {
        FluidRockConfig {
            perm_channel_md: 1000.0,
            perm_background_md: 100.0,
            porosity: 0.2,
            viscosity_water_cp: 0.5,
            viscosity_oil_cp: 2.0,
            corey_water: 2.0,
            corey_oil: 2.0,
            initial_water_saturation: 0.0,
            well_radius_m: 0.1,
        }
    }
}

impl FluidRockConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.perm_channel_md) && pos(self.perm_background_md)) {
            return Err(Error::config("permeabilities must be positive"));
        }
        if !(pos(self.viscosity_water_cp) && pos(self.viscosity_oil_cp)) {
            return Err(Error::config("viscosities must be positive"));
        }
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(Error::config(format!(
                "porosity must lie in (0, 1), got {}",
                self.porosity
            )));
        }
        if !(self.corey_water >= 1.0 && self.corey_oil >= 1.0) {
            return Err(Error::config("Corey exponents must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.initial_water_saturation) {
            return Err(Error::config("initial water saturation must lie in [0, 1]"));
        }
        if !pos(self.well_radius_m) {
            return Err(Error::config("well radius must be positive"));
        }
        Ok(())
    }

    /// Absolute permeability in m² for a facies code.
    pub fn permeability(&self, facies: u8) -> f64 {
        MILLIDARCY
            * if facies == crate::facies::CHANNEL {
                self.perm_channel_md
            } else {
                self.perm_background_md
            }
    }

    /// Water and oil mobilities, 1/(Pa·s).
    pub fn mobilities(&self, sw: f64) -> (f64, f64) {
        let s = sw.clamp(0.0, 1.0);
        (
            corey(s, self.corey_water) / (self.viscosity_water_cp * CENTIPOISE),
            corey(1.0 - s, self.corey_oil) / (self.viscosity_oil_cp * CENTIPOISE),
        )
    }

    pub fn fractional_flow(&self, sw: f64) -> f64 {
        let (lw, lo) = self.mobilities(sw);
        let lt = lw + lo;
        if lt > 0.0 {
            lw / lt
        } else {
            0.0
        }
    }

    /// d fw / d S.
    pub fn fractional_flow_slope(&self, sw: f64) -> f64 {
        let s = sw.clamp(0.0, 1.0);
        let (mw, mo) = (
            self.viscosity_water_cp * CENTIPOISE,
            self.viscosity_oil_cp * CENTIPOISE,
        );
        let (lw, lo) = self.mobilities(s);
        let dlw = self.corey_water * corey(s, self.corey_water - 1.0) / mw;
        let dlo = -self.corey_oil * corey(1.0 - s, self.corey_oil - 1.0) / mo;
        let lt = lw + lo;
        if lt > 0.0 {
            (dlw * lo - lw * dlo) / (lt * lt)
        } else {
            0.0
        }
    }

    /// Slope of the chord of fw between two saturations.
    pub fn fractional_flow_secant(&self, a: f64, fa: f64, b: f64, fb: f64) -> f64 {
        if (a - b).abs() > 1e-9 {
            (fa - fb) / (a - b)
        } else {
            self.fractional_flow_slope(0.5 * (a + b))
        }
    }
}

fn corey(s: f64, n: f64) -> f64 {
    if n.fract() == 0.0 && n <= 8.0 {
        s.powi(n as i32)
    } else {
        s.powf(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub horizon_years: f64,
    pub report_interval_days: f64,
    /// Longest interval between pressure solves; saturation is sub-cycled
    /// inside it under the Courant bound.
    pub max_timestep_days: f64,
    /// Courant number of the explicit saturation step, measured with the
    /// chord slopes of fw between each cell and its upstream neighbours.
    pub cfl: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            horizon_years: 10.0,
            report_interval_days: DAYS_PER_YEAR / 12.0,
            max_timestep_days: DAYS_PER_YEAR / 12.0,
            cfl: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.horizon_years) {
            return Err(Error::config("horizon must be positive"));
        }
        if !pos(self.report_interval_days) || self.report_interval_days > self.horizon_days() {
            return Err(Error::config(
                "report interval must be positive and no longer than the horizon",
            ));
        }
        if !pos(self.max_timestep_days) {
            return Err(Error::config("max timestep must be positive"));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::config(format!(
                "CFL number must lie in (0, 1] for a stable explicit step, got {}",
                self.cfl
            )));
        }
        Ok(())
    }

    pub fn horizon_days(&self) -> f64 {
        self.horizon_years * DAYS_PER_YEAR
    }

    pub fn report_times_days(&self) -> Vec<f64> {
        let n = (self.horizon_days() / self.report_interval_days + 1e-9).floor() as usize;
        (1..=n).map(|k| k as f64 * self.report_interval_days).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportedWell {
    pub name: String,
    pub cell: (usize, usize),
    pub quantity: Quantity,
}

/// Simulated well responses, stored time-major with wells in deck order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedData {
    pub times_days: Vec<f64>,
    pub wells: Vec<ReportedWell>,
    pub values: Vec<f64>,
}

impl PredictedData {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, time: usize, well: usize) -> f64 {
        self.values[time * self.wells.len() + well]
    }

    /// One well's series over all report times.
    pub fn series(&self, well: usize) -> Vec<f64> {
        (0..self.times_days.len()).map(|t| self.get(t, well)).collect()
    }

    /// The data as an observation set with the given per-datum sd.
    pub fn to_observations(&self, sd: impl Fn(Quantity, f64) -> f64) -> Result<ObservationSet> {
        let nw = self.wells.len();
        let data = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &value)| {
                let w = &self.wells[k % nw];
                Datum {
                    time_days: self.times_days[k / nw],
                    well: w.name.clone(),
                    quantity: w.quantity,
                    value,
                    sd: sd(w.quantity, value),
                    anchor: w.cell,
                }
            })
            .collect();
        ObservationSet::new(data)
    }
}

/// Facies value at each well cell, deck order.
pub fn observe_facies(x: &FaciesRealization, wells: &[WellSpec]) -> Result<Vec<f64>> {
    check_wells_on_grid(wells, x.grid())?;
    Ok(wells.iter().map(|w| f64::from(x.get(w.i, w.j))).collect())
}

/// Hard-data observation set: exact facies at well cells with a fixed sd.
pub fn facies_observations(
    x: &FaciesRealization,
    wells: &[WellSpec],
    sd: f64,
) -> Result<ObservationSet> {
    let values = observe_facies(x, wells)?;
    ObservationSet::new(
        wells
            .iter()
            .zip(values)
            .map(|(w, value)| Datum {
                time_days: 0.0,
                well: w.name.clone(),
                quantity: Quantity::Facies,
                value,
                sd,
                anchor: w.cell(),
            })
            .collect(),
    )
}

/// Absolute sd floors used where the relative rule degenerates near zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseFloor {
    pub water_cut: f64,
    pub injection_rate_m3_per_day: f64,
}

impl Default for NoiseFloor {
    fn default() -> Self {
        NoiseFloor {
            water_cut: 0.01,
            injection_rate_m3_per_day: 1.0,
        }
    }
}

impl NoiseFloor {
    pub fn uniform(floor: f64) -> Self {
        NoiseFloor {
            water_cut: floor,
            injection_rate_m3_per_day: floor,
        }
    }

    pub fn for_quantity(&self, q: Quantity) -> f64 {
        match q {
            Quantity::WaterInjectionRate => self.injection_rate_m3_per_day,
            _ => self.water_cut,
        }
    }

    /// `max(relative_sd * |value|, floor)`.
    pub fn sd(&self, q: Quantity, value: f64, relative_sd: f64) -> f64 {
        (relative_sd * value.abs()).max(self.for_quantity(q))
    }
}

/// Hard-data forward model: facies at the well cells.
#[derive(Debug, Clone)]
pub struct FaciesDataModel {
    pub wells: Vec<WellSpec>,
}

impl ForwardModel for FaciesDataModel {
    fn predict(&self, x: &FaciesRealization) -> Result<Vec<f64>> {
        observe_facies(x, &self.wells)
    }
}

/// Production forward model: the full simulation deck.
#[derive(Debug, Clone)]
pub struct ReservoirModel {
    pub fluids: FluidRockConfig,
    pub wells: Vec<WellSpec>,
    pub schedule: ScheduleConfig,
}

impl ReservoirModel {
    pub fn run(&self, x: &FaciesRealization) -> Result<PredictedData> {
        simulate(x, &self.fluids, &self.wells, &self.schedule)
    }
}

impl ForwardModel for ReservoirModel {
    fn predict(&self, x: &FaciesRealization) -> Result<Vec<f64>> {
        self.run(x).map(|d| d.values)
    }
}

const NOISE_STREAM: &str = "observation-noise";

/// Perturb each datum with independent Gaussian noise and record its sd.
pub fn add_noise(
    clean: &PredictedData,
    relative_sd: f64,
    floor: NoiseFloor,
    seed: u64,
) -> Result<ObservationSet> {
    if !(relative_sd > 0.0 && relative_sd.is_finite()) {
        return Err(Error::config(format!(
            "relative sd must be positive, got {relative_sd}"
        )));
    }
    if !(floor.water_cut > 0.0 && floor.injection_rate_m3_per_day > 0.0) {
        return Err(Error::config("noise floors must be positive"));
    }
    let mut obs = clean.to_observations(|q, v| floor.sd(q, v, relative_sd))?;
    let mut rng = stream_rng(seed, NOISE_STREAM, 0);
    for d in &mut obs.data {
        let e: f64 = StandardNormal.sample(&mut rng);
        d.value += d.sd * e;
    }
    Ok(obs)
}
