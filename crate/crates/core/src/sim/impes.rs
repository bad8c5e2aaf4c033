//! IMPES: implicit pressure, explicit upstream saturation transport.

use std::f64::consts::PI;

use super::pcg::{solve_pcg, FivePoint};
use super::{
    validate_deck, FluidRockConfig, PredictedData, ReportedWell, ScheduleConfig, WellKind,
    WellSpec, BAR, DAY,
};
use crate::error::{Error, Result};
use crate::facies::FaciesRealization;

const PRESSURE_TOL: f64 = 1e-10;

/// Per-run bookkeeping used by the conservation tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Saturation substeps.
    pub steps: usize,
    pub pressure_steps: usize,
    pub cg_iterations: usize,
    /// Worst per-step `|injected - produced - accumulated|` over the step's
    /// water throughput.
    pub max_water_balance_error: f64,
    /// Same for the whole run.
    pub cumulative_water_balance_error: f64,
    /// Worst `|sum of well rates| / sum of |well rates|` (incompressibility).
    pub max_volume_balance_error: f64,
    pub min_pressure_bar: f64,
    pub max_pressure_bar: f64,
}

pub fn simulate(
    x: &FaciesRealization,
    fluids: &FluidRockConfig,
    wells: &[WellSpec],
    schedule: &ScheduleConfig,
) -> Result<PredictedData> {
    simulate_with_diagnostics(x, fluids, wells, schedule).map(|(d, _)| d)
}

fn sim_err(msg: impl Into<String>) -> Error {
    Error::Simulation {
        member: None,
        msg: msg.into(),
    }
}

pub fn simulate_with_diagnostics(
    x: &FaciesRealization,
    fluids: &FluidRockConfig,
    wells: &[WellSpec],
    schedule: &ScheduleConfig,
) -> Result<(PredictedData, Diagnostics)> {
    let grid = *x.grid();
    fluids.validate()?;
    schedule.validate()?;
    validate_deck(wells, &grid)?;

    let (ni, nj, n) = (grid.ni, grid.nj, grid.len());
    let h = grid.thickness;
    let perm: Vec<f64> = x.values().iter().map(|&f| fluids.permeability(f)).collect();
    let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);

    // Geometric transmissibilities, m³.
    let mut tx = vec![0.0; n];
    let mut ty = vec![0.0; n];
    for j in 0..nj {
        for i in 0..ni {
            let k = grid.index(i, j);
            if i + 1 < ni {
                tx[k] = harmonic(perm[k], perm[k + 1]) * grid.dy * h / grid.dx;
            }
            if j + 1 < nj {
                ty[k] = harmonic(perm[k], perm[k + ni]) * grid.dx * h / grid.dy;
            }
        }
    }

    let r_o = 0.14 * (grid.dx * grid.dx + grid.dy * grid.dy).sqrt();
    if r_o <= fluids.well_radius_m {
        return Err(Error::config(format!(
            "well radius {} m is not smaller than the Peaceman radius {r_o:.3} m",
            fluids.well_radius_m
        )));
    }
    let well_cell: Vec<usize> = wells.iter().map(|w| grid.index(w.i, w.j)).collect();
    let well_index: Vec<f64> = well_cell
        .iter()
        .map(|&c| 2.0 * PI * perm[c] * h / (r_o / fluids.well_radius_m).ln())
        .collect();
    // Pressures are solved relative to the lowest BHP to keep the right-hand
    // side at the scale of the pressure drop.
    let p_ref = wells.iter().map(|w| w.bhp_bar).fold(f64::INFINITY, f64::min) * BAR;
    let well_bhp: Vec<f64> = wells.iter().map(|w| w.bhp_bar * BAR - p_ref).collect();

    let pore_volume = fluids.porosity * grid.dx * grid.dy * h;
    let total_mobility = |s: f64| {
        let (a, b) = fluids.mobilities(s);
        a + b
    };

    let report_times = schedule.report_times_days();
    let reported: Vec<ReportedWell> = wells
        .iter()
        .map(|w| ReportedWell {
            name: w.name.clone(),
            cell: w.cell(),
            quantity: w.quantity(),
        })
        .collect();
    let mut values = Vec::with_capacity(report_times.len() * wells.len());

    let mut sat = vec![fluids.initial_water_saturation; n];
    let mut lam: Vec<f64> = sat.iter().map(|&s| total_mobility(s)).collect();
    let mut u = vec![0.5 * well_bhp.iter().cloned().fold(0.0, f64::max); n];
    let mut fx = vec![0.0; n];
    let mut fy = vec![0.0; n];
    let mut have_flux = false;
    let mut q = vec![0.0; wells.len()];
    let mut a = FivePoint::zeros(ni, nj);
    let mut rhs = vec![0.0; n];
    let mut fw = vec![0.0; n];
    let mut net = vec![0.0; n];
    let mut rate = vec![0.0; n];
    let max_cg = 20 * n + 200;

    let mut diag = Diagnostics {
        min_pressure_bar: f64::INFINITY,
        max_pressure_bar: f64::NEG_INFINITY,
        ..Diagnostics::default()
    };
    let water_in_place = |s: &[f64]| s.iter().sum::<f64>() * pore_volume;
    let initial_water = water_in_place(&sat);
    let mut cumulative_well_water = 0.0;
    let mut cumulative_throughput = 0.0;

    let mut t = 0.0;
    let mut next = 0;
    let max_dt = schedule.max_timestep_days * DAY;
    loop {
        // Pressure with face mobilities upwinded on the previous fluxes.
        let face_mob = |flux: f64, a: usize, b: usize, have: bool| {
            if !have {
                0.5 * (lam[a] + lam[b])
            } else if flux >= 0.0 {
                lam[a]
            } else {
                lam[b]
            }
        };
        a.diag.iter_mut().for_each(|v| *v = 0.0);
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..n {
            if tx[k] > 0.0 {
                let c = tx[k] * face_mob(fx[k], k, k + 1, have_flux);
                a.east[k] = c;
                a.diag[k] += c;
                a.diag[k + 1] += c;
            }
            if ty[k] > 0.0 {
                let c = ty[k] * face_mob(fy[k], k, k + ni, have_flux);
                a.north[k] = c;
                a.diag[k] += c;
                a.diag[k + ni] += c;
            }
        }
        for (w, &c) in well_cell.iter().enumerate() {
            let c_w = well_index[w] * lam[c];
            a.diag[c] += c_w;
            rhs[c] += c_w * well_bhp[w];
        }
        diag.cg_iterations += solve_pcg(&a, &rhs, &mut u, PRESSURE_TOL, max_cg)
            .map_err(|e| sim_err(format!("pressure solve failed: {e}")))?;

        for k in 0..n {
            if tx[k] > 0.0 {
                fx[k] = a.east[k] * (u[k] - u[k + 1]);
            }
            if ty[k] > 0.0 {
                fy[k] = a.north[k] * (u[k] - u[k + ni]);
            }
        }
        have_flux = true;
        let mut q_abs = 0.0;
        let mut q_sum = 0.0;
        for (w, &c) in well_cell.iter().enumerate() {
            q[w] = well_index[w] * lam[c] * (well_bhp[w] - u[c]);
            q_abs += q[w].abs();
            q_sum += q[w];
        }
        if q_abs > 0.0 {
            diag.max_volume_balance_error = diag.max_volume_balance_error.max(q_sum.abs() / q_abs);
        }
        for &v in &u {
            diag.min_pressure_bar = diag.min_pressure_bar.min((v + p_ref) / BAR);
            diag.max_pressure_bar = diag.max_pressure_bar.max((v + p_ref) / BAR);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(sim_err("non-finite pressure"));
        }

        if next < report_times.len() && t >= report_times[next] * DAY * (1.0 - 1e-12) {
            for (w, spec) in wells.iter().enumerate() {
                let c = well_cell[w];
                values.push(match spec.kind {
                    WellKind::Producer if q[w] < 0.0 => fluids.fractional_flow(sat[c]),
                    WellKind::Producer => 0.0,
                    WellKind::Injector => q[w].max(0.0) * DAY,
                });
            }
            next += 1;
        }
        if next == report_times.len() {
            break;
        }

        // Saturation is sub-cycled on the frozen fluxes. Each substep honors
        // the Courant bound that keeps every new saturation a convex
        // combination of old upstream values.
        let until_report = report_times[next] * DAY - t;
        let lands_on_report = max_dt >= until_report;
        let dt_pressure = max_dt.min(until_report);
        let mut elapsed = 0.0;
        while elapsed < dt_pressure {
            for (f, &s) in fw.iter_mut().zip(&sat) {
                *f = fluids.fractional_flow(s);
            }
            rate.iter_mut().for_each(|v| *v = 0.0);
            net.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..n {
                for (f, other) in [(fx[k], k + 1), (fy[k], k + ni)] {
                    if f == 0.0 {
                        continue;
                    }
                    let (up, down) = if f > 0.0 { (k, other) } else { (other, k) };
                    let w = f * fw[up];
                    net[k] -= w;
                    net[other] += w;
                    rate[down] += f.abs()
                        * fluids.fractional_flow_secant(sat[up], fw[up], sat[down], fw[down]);
                }
            }
            let mut well_water = 0.0;
            let mut step_throughput = 0.0;
            for (w, &c) in well_cell.iter().enumerate() {
                let water = if q[w] > 0.0 && wells[w].kind == WellKind::Injector {
                    rate[c] += q[w] * fluids.fractional_flow_secant(1.0, 1.0, sat[c], fw[c]);
                    q[w]
                } else {
                    q[w] * fw[c]
                };
                net[c] += water;
                well_water += water;
                step_throughput += water.abs();
            }
            let max_rate = rate.iter().cloned().fold(0.0, f64::max);
            let remaining = dt_pressure - elapsed;
            let dt = if max_rate > 0.0 {
                remaining.min(schedule.cfl * pore_volume / max_rate)
            } else {
                remaining
            };
            // Avoid a sliver step at the end of the interval.
            let dt = if dt < remaining && remaining - dt < 1e-9 * dt_pressure {
                remaining
            } else {
                dt
            };
            step_throughput *= dt;

            let before = water_in_place(&sat);
            for k in 0..n {
                let s = sat[k] + dt * net[k] / pore_volume;
                if !(-1e-9..=1.0 + 1e-9).contains(&s) {
                    return Err(sim_err(format!(
                        "saturation {s} left [0, 1] at cell {k}; the timestep violated stability"
                    )));
                }
                sat[k] = s.clamp(0.0, 1.0);
            }
            let err = ((water_in_place(&sat) - before) - dt * well_water).abs();
            if step_throughput > 0.0 {
                diag.max_water_balance_error =
                    diag.max_water_balance_error.max(err / step_throughput);
            }
            cumulative_well_water += dt * well_water;
            cumulative_throughput += step_throughput;
            diag.steps += 1;
            elapsed = if dt == remaining { dt_pressure } else { elapsed + dt };
        }
        for (l, &s) in lam.iter_mut().zip(&sat) {
            *l = total_mobility(s);
        }
        diag.pressure_steps += 1;
        t = if lands_on_report {
            report_times[next] * DAY
        } else {
            t + dt_pressure
        };
    }
    if cumulative_throughput > 0.0 {
        diag.cumulative_water_balance_error = ((water_in_place(&sat) - initial_water)
            - cumulative_well_water)
            .abs()
            / cumulative_throughput;
    }

    Ok((
        PredictedData {
            times_days: report_times,
            wells: reported,
            values,
        },
        diag,
    ))
}
