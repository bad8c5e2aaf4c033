//! Procedural channelized prior: sinusoidal channel centerlines rasterized
//! with a finite width and unioned until a target channel fraction is met.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FaciesRealization, Grid2D, CHANNEL};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{stream_rng, StreamRng};

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    fn sample(&self, rng: &mut StreamRng) -> f64 {
        if self.max > self.min {
            rng.gen_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn is_valid(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelPriorConfig {
    pub channel_count_min: usize,
    pub channel_count_max: usize,
    /// Centerline sinuosity amplitude, cells.
    pub amplitude_cells: Range,
    pub wavelength_cells: Range,
    pub width_cells: Range,
    pub orientation_mean_deg: f64,
    /// Orientation is drawn uniformly in `mean ± spread`.
    pub orientation_spread_deg: f64,
    pub target_channel_fraction: f64,
    pub seed: u64,
}

impl Default for ChannelPriorConfig {
    fn default() -> Self {
        ChannelPriorConfig {
            channel_count_min: 1,
            channel_count_max: 24,
            amplitude_cells: Range::new(2.0, 6.0),
            wavelength_cells: Range::new(20.0, 40.0),
            width_cells: Range::new(3.0, 6.0),
            orientation_mean_deg: 0.0,
            orientation_spread_deg: 10.0,
            target_channel_fraction: 0.3,
            seed: 0,
        }
    }
}

impl ChannelPriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channel_count_min == 0 || self.channel_count_min > self.channel_count_max {
            return Err(Error::config(format!(
                "channel count range [{}, {}] is invalid",
                self.channel_count_min, self.channel_count_max
            )));
        }
        for (name, r) in [
            ("amplitude_cells", self.amplitude_cells),
            ("wavelength_cells", self.wavelength_cells),
            ("width_cells", self.width_cells),
        ] {
            if !r.is_valid() {
                return Err(Error::config(format!("{name} range is invalid")));
            }
        }
        if self.amplitude_cells.min < 0.0 {
            return Err(Error::config("amplitude must be nonnegative"));
        }
        if self.wavelength_cells.min <= 0.0 {
            return Err(Error::config("wavelength must be positive"));
        }
        if self.width_cells.min < 1.0 {
            return Err(Error::config("channel width must be at least one cell"));
        }
        if !(self.orientation_mean_deg.is_finite()
            && self.orientation_spread_deg.is_finite()
            && self.orientation_spread_deg >= 0.0)
        {
            return Err(Error::config("orientation mean/spread must be finite, spread >= 0"));
        }
        let t = self.target_channel_fraction;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config(format!(
                "target_channel_fraction must lie in (0, 1), got {t}"
            )));
        }
        Ok(())
    }
}

/// Rasterize one sinusoidal channel into a list of cell indices.
fn sample_channel(cfg: &ChannelPriorConfig, grid: &Grid2D, rng: &mut StreamRng) -> Vec<usize> {
    let theta = (cfg.orientation_mean_deg
        + rng.gen_range(-1.0..=1.0) * cfg.orientation_spread_deg)
        .to_radians();
    let amplitude = cfg.amplitude_cells.sample(rng);
    let wavelength = cfg.wavelength_cells.sample(rng);
    let width = cfg.width_cells.sample(rng);
    let phase = rng.gen_range(0.0..2.0 * PI);

    let (ux, uy) = (theta.cos(), theta.sin());
    let (nx, ny) = (-uy, ux);
    let (cx, cy) = (grid.ni as f64 / 2.0, grid.nj as f64 / 2.0);
    let half_diag = cx.hypot(cy);

    // Anchor on the grid's center line across the main flow direction. When
    // the geometry allows it, keep the meander band inside the grid over the
    // whole traverse so the channel spans two opposite edges.
    let half_band = amplitude + width / 2.0;
    let (anchor_x, anchor_y) = if ux.abs() >= uy.abs() {
        let slope = uy / ux;
        let margin = half_band / ux.abs() + slope.abs() * cx;
        let y = sample_offset(rng, margin, grid.nj as f64 - margin, grid.nj as f64);
        (cx, y)
    } else {
        let slope = ux / uy;
        let margin = half_band / uy.abs() + slope.abs() * cy;
        let x = sample_offset(rng, margin, grid.ni as f64 - margin, grid.ni as f64);
        (x, cy)
    };
    let (smin, smax) = (-half_diag - 2.0, half_diag + 2.0);

    let radius = width / 2.0;
    let mut mark = vec![false; grid.len()];
    let step = 0.25;
    let mut s = smin - 1.0;
    while s <= smax + 1.0 {
        let lateral = amplitude * (2.0 * PI * s / wavelength + phase).sin();
        let px = anchor_x + s * ux + lateral * nx;
        let py = anchor_y + s * uy + lateral * ny;
        if px >= 0.0 && py >= 0.0 && px < grid.ni as f64 && py < grid.nj as f64 {
            // The cell under the centerline is always part of the channel.
            mark[grid.index(px as usize, py as usize)] = true;
        }
        let i0 = (px - radius - 0.5).floor().max(0.0) as usize;
        let j0 = (py - radius - 0.5).floor().max(0.0) as usize;
        let i1 = ((px + radius - 0.5).ceil().max(-1.0) as isize).min(grid.ni as isize - 1);
        let j1 = ((py + radius - 0.5).ceil().max(-1.0) as isize).min(grid.nj as isize - 1);
        if i1 >= 0 && j1 >= 0 {
            for j in j0..=j1 as usize {
                for i in i0..=i1 as usize {
                    let (dx, dy) = (i as f64 + 0.5 - px, j as f64 + 0.5 - py);
                    if dx * dx + dy * dy <= radius * radius {
                        mark[grid.index(i, j)] = true;
                    }
                }
            }
        }
        s += step;
    }
    largest_component(grid, &mark)
}

fn sample_offset(rng: &mut StreamRng, lo: f64, hi: f64, extent: f64) -> f64 {
    if lo <= hi {
        rng.gen_range(lo..=hi)
    } else {
        rng.gen_range(0.0..=extent)
    }
}

/// Largest 8-connected group of marked cells, in ascending index order.
fn largest_component(grid: &Grid2D, mark: &[bool]) -> Vec<usize> {
    let mut label = vec![usize::MAX; grid.len()];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..grid.len() {
        if !mark[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = start;
        let mut comp = vec![start];
        let mut head = 0;
        while head < comp.len() {
            let (i, j) = grid.coords(comp[head]);
            head += 1;
            for nj in j.saturating_sub(1)..=(j + 1).min(grid.nj - 1) {
                for ni in i.saturating_sub(1)..=(i + 1).min(grid.ni - 1) {
                    let m = grid.index(ni, nj);
                    if mark[m] && label[m] == usize::MAX {
                        label[m] = start;
                        comp.push(m);
                    }
                }
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

/// The accepted channels of realization `index`, each as its own cell list.
///
/// Channels are added while the union fraction approaches the target; the
/// channel that would cross it is kept only when that lands closer to the
/// target than stopping short.
pub fn generate_channel_masks(
    cfg: &ChannelPriorConfig,
    grid: &Grid2D,
    index: u64,
) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(cfg.seed, "prior", index);
    let target = cfg.target_channel_fraction;
    let n = grid.len() as f64;
    let mut union = vec![false; grid.len()];
    let mut count = 0usize;
    let mut channels = Vec::new();
    while channels.len() < cfg.channel_count_max {
        let cells = sample_channel(cfg, grid, &mut rng);
        let added = cells.iter().filter(|&&k| !union[k]).count();
        let frac = count as f64 / n;
        let next = (count + added) as f64 / n;
        if channels.len() >= cfg.channel_count_min
            && (frac >= target || (next - target).abs() > (frac - target).abs())
        {
            break;
        }
        for &k in &cells {
            union[k] = true;
        }
        count += added;
        channels.push(cells);
    }
    channels
}

fn realization(cfg: &ChannelPriorConfig, grid: &Grid2D, index: u64) -> FaciesRealization {
    let mut x = FaciesRealization::filled(*grid, 0);
    for cells in generate_channel_masks(cfg, grid, index) {
        for k in cells {
            x.set(k, CHANNEL);
        }
    }
    x
}

/// Generate `count` independent unconditioned realizations. Realization `i`
/// depends only on `(cfg, grid, i)`.
pub fn generate_prior(
    cfg: &ChannelPriorConfig,
    grid: &Grid2D,
    count: usize,
    exec: Execution,
) -> Result<Vec<FaciesRealization>> {
    cfg.validate()?;
    grid.validate()?;
    if count == 0 {
        return Err(Error::config("prior realization count must be at least 1"));
    }
    Ok(exec.map(count, |i| realization(cfg, grid, i as u64)))
}

/// Same generator, indices offset by `first` (used to draw disjoint sets).
pub fn generate_prior_from(
    cfg: &ChannelPriorConfig,
    grid: &Grid2D,
    first: u64,
    count: usize,
    exec: Execution,
) -> Result<Vec<FaciesRealization>> {
    cfg.validate()?;
    grid.validate()?;
    if count == 0 {
        return Err(Error::config("prior realization count must be at least 1"));
    }
    Ok(exec.map(count, |i| realization(cfg, grid, first + i as u64)))
}
