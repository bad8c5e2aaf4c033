//! Evaluation metrics, the latent perturbation sweep and experiment drivers.

mod experiments;
mod sweep;

pub use experiments::{
    case1_hard_layout, case1_production_deck, case2_deck, run_case1, run_case1_hard,
    run_case1_production, run_case2, Case1Config, Case1Outcome, Case2Config, Case2Outcome,
    HardDataConfig, ParamKind, ProductionConfig, VaeSettings,
};
pub use sweep::{latent_sqrt_model, perturbation_sweep, PerturbSweepConfig, SweepResult};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::esmda::HistoryMatch;
use crate::facies::{FaciesRealization, Raster};
use crate::observation::ObservationSet;
use crate::sim::WellSpec;

/// `O_N = (1 / 2N_d) Σ ((d_obs - d) / sd)²`.
pub fn normalized_objective(d_obs: &[f64], d: &[f64], sd: &[f64]) -> Result<f64> {
    check_dim("predicted data", d_obs.len(), d.len())?;
    check_dim("data sd", d_obs.len(), sd.len())?;
    if d_obs.is_empty() {
        return Err(Error::config("objective needs at least one datum"));
    }
    if sd.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::config("data sd must be positive"));
    }
    let sum: f64 = d_obs
        .iter()
        .zip(d)
        .zip(sd)
        .map(|((o, p), s)| ((o - p) / s).powi(2))
        .sum();
    Ok(sum / (2.0 * d_obs.len() as f64))
}

/// Percentage of (member, well) pairs whose facies differs from the truth.
pub fn facies_failure_rate(
    ensemble: &[FaciesRealization],
    wells: &[WellSpec],
    truth: &[f64],
) -> Result<f64> {
    if ensemble.is_empty() || wells.is_empty() {
        return Err(Error::config("failure rate needs a non-empty ensemble and well list"));
    }
    check_dim("true facies values", wells.len(), truth.len())?;
    let mut wrong = 0usize;
    for x in ensemble {
        for (w, &t) in crate::sim::observe_facies(x, wells)?.iter().zip(truth) {
            if *w != t {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / (ensemble.len() * wells.len()) as f64)
}

fn cell_variances(ensemble: &[FaciesRealization]) -> Vec<f64> {
    let n = ensemble.len() as f64;
    let cells = ensemble[0].values().len();
    (0..cells)
        .map(|k| {
            let mean = ensemble.iter().map(|x| f64::from(x.values()[k])).sum::<f64>() / n;
            ensemble
                .iter()
                .map(|x| (f64::from(x.values()[k]) - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub ratios: Vec<f64>,
    pub mean: f64,
}

/// Per-cell posterior/prior variance ratio; cells without prior variance
/// report 1.
pub fn normalized_variance(
    prior: &[FaciesRealization],
    posterior: &[FaciesRealization],
) -> Result<VarianceMap> {
    if prior.len() < 2 || posterior.len() < 2 {
        return Err(Error::config("normalized variance needs at least two members"));
    }
    check_dim("posterior member count", prior.len(), posterior.len())?;
    let grid = prior[0].grid();
    if posterior
        .iter()
        .chain(prior)
        .any(|x| !x.grid().same_shape(grid))
    {
        return Err(Error::config("prior and posterior realizations must share one grid"));
    }
    let (vp, vq) = (cell_variances(prior), cell_variances(posterior));
    let ratios: Vec<f64> = vp
        .iter()
        .zip(&vq)
        .map(|(p, q)| if *p > 0.0 { q / p } else { 1.0 })
        .collect();
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(VarianceMap { ratios, mean })
}

/// Per-cell channel probability.
pub fn mean_facies(ensemble: &[FaciesRealization]) -> Vec<f64> {
    let n = ensemble.len() as f64;
    (0..ensemble[0].values().len())
        .map(|k| ensemble.iter().map(|x| f64::from(x.values()[k])).sum::<f64>() / n)
        .collect()
}

/// Box-plot summary with Tukey whiskers (most extreme points within 1.5 IQR).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("box statistics need finite, non-empty data"));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let whisker_low = *s.iter().find(|&&v| v >= q1 - 1.5 * iqr).expect("non-empty");
        let whisker_high = *s.iter().rev().find(|&&v| v <= q3 + 1.5 * iqr).expect("non-empty");
        Ok(BoxStats {
            min: s[0],
            whisker_low,
            q1,
            median: quantile(&s, 0.5),
            q3,
            whisker_high,
            max: s[s.len() - 1],
        })
    }

    pub const CSV_HEADER: &'static str = "label,stage,min,whisker_low,q1,median,q3,whisker_high,max";

    pub fn csv_row(&self, label: &str, stage: &str) -> String {
        format!(
            "{label},{stage},{},{},{},{},{},{},{}",
            self.min, self.whisker_low, self.q1, self.median, self.q3, self.whisker_high, self.max
        )
    }
}

/// Everything reported for one history-matching run.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub label: String,
    pub prior_objectives: Vec<f64>,
    pub posterior_objectives: Vec<f64>,
    pub prior_box: BoxStats,
    pub posterior_box: BoxStats,
    /// Hard-data failure percentage, prior and posterior.
    pub failure_percent: Option<(f64, f64)>,
    pub mean_facies: Vec<f64>,
    pub normalized_variance: VarianceMap,
    /// Mean count of isolated single cells per posterior member.
    pub isolated_cells_mean: f64,
    /// Full `iteration,member,objective` log.
    pub objective_log: String,
}

impl MetricReport {
    /// Summarize a trajectory. `hard_data` adds the failure metric.
    pub fn from_history(
        label: &str,
        hm: &HistoryMatch,
        hard_data: Option<(&[WellSpec], &ObservationSet)>,
    ) -> Result<Self> {
        let prior = hm.prior();
        let post = hm.posterior();
        let failure_percent = match hard_data {
            Some((wells, obs)) => {
                let truth = obs.values();
                Some((
                    facies_failure_rate(&prior.facies, wells, &truth)?,
                    facies_failure_rate(&post.facies, wells, &truth)?,
                ))
            }
            None => None,
        };
        let prior_objectives = hm.objectives[0].clone();
        let posterior_objectives = hm.objectives.last().expect("non-empty").clone();
        Ok(MetricReport {
            label: label.to_string(),
            prior_box: BoxStats::from_values(&prior_objectives)?,
            posterior_box: BoxStats::from_values(&posterior_objectives)?,
            prior_objectives,
            posterior_objectives,
            failure_percent,
            mean_facies: mean_facies(&post.facies),
            normalized_variance: normalized_variance(&prior.facies, &post.facies)?,
            isolated_cells_mean: post
                .facies
                .iter()
                .map(|x| x.isolated_cells() as f64)
                .sum::<f64>()
                / post.facies.len() as f64,
            objective_log: hm.objective_csv(),
        })
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "prior_median_objective,{}", self.prior_box.median);
        let _ = writeln!(out, "posterior_median_objective,{}", self.posterior_box.median);
        if let Some((p, q)) = self.failure_percent {
            let _ = writeln!(out, "prior_failure_percent,{p}");
            let _ = writeln!(out, "posterior_failure_percent,{q}");
        }
        let _ = writeln!(out, "mean_normalized_variance,{}", self.normalized_variance.mean);
        let _ = writeln!(out, "mean_isolated_cells,{}", self.isolated_cells_mean);
        out
    }

    /// `(file name, contents)` of every artifact, in a fixed order.
    pub fn files(&self, grid: &crate::facies::Grid2D) -> Result<Vec<(String, String)>> {
        let l = &self.label;
        let raster = |v: &[f64]| Raster::new(grid.ni, grid.nj, v.to_vec()).map(|r| r.to_text());
        Ok(vec![
            (format!("{l}_objectives.csv"), self.objective_log.clone()),
            (
                format!("{l}_boxplot.csv"),
                format!(
                    "{}\n{}\n{}\n",
                    BoxStats::CSV_HEADER,
                    self.prior_box.csv_row(l, "prior"),
                    self.posterior_box.csv_row(l, "posterior")
                ),
            ),
            (format!("{l}_summary.csv"), self.summary_csv()),
            (format!("{l}_mean_facies.txt"), raster(&self.mean_facies)?),
            (
                format!("{l}_normalized_variance.txt"),
                raster(&self.normalized_variance.ratios)?,
            ),
        ])
    }

    /// Write `<label>_*` artifacts into `dir`.
    pub fn write(&self, dir: &Path, grid: &crate::facies::Grid2D) -> Result<()> {
        for (name, text) in self.files(grid)? {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
