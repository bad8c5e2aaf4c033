//! Canned desk-scale versions of the two synthetic test cases.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::sweep::{latent_sqrt_model, perturbation_sweep, PerturbSweepConfig, SweepResult};
use super::MetricReport;
use crate::error::{Error, Result};
use crate::esmda::{run_history_match, EsmdaConfig, UpdateScheme};
use crate::exec::Execution;
use crate::facies::{generate_prior_from, write_raster, ChannelPriorConfig, Grid2D, Raster};
use crate::localization::LocalizationSpec;
use crate::param::{encode_ensemble, pca_fit, Parameterization};
use crate::rng::derive_seed;
use crate::sim::{
    add_noise, facies_observations, FaciesDataModel, FluidRockConfig, NoiseFloor, ReservoirModel,
    ScheduleConfig, WellSpec,
};
use crate::vae::{vae_smooth, vae_train, VaeArchitecture, VaeModel, VaeTrainConfig};

/// Prior realizations are addressed by index; these offsets keep the
/// training set, the ensemble, the truth and sweep bases disjoint.
const ENSEMBLE_OFFSET: u64 = 1_000_000;
const TRUTH_INDEX: u64 = 2_000_000;
const SWEEP_OFFSET: u64 = 3_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Pca,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSettings {
    pub latent_dim: usize,
    pub hidden_units: usize,
    pub training_count: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// KL multiplier; absent means `1 / (2 N_x)`.
    pub kl_weight: Option<f64>,
}

impl Default for VaeSettings {
    fn default() -> Self {
        VaeSettings {
            latent_dim: 64,
            hidden_units: 256,
            training_count: 2000,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 10,
            validation_fraction: 0.3,
            kl_weight: None,
        }
    }
}

impl VaeSettings {
    pub fn architecture(&self, cells: usize) -> VaeArchitecture {
        VaeArchitecture {
            encoder_hidden: vec![self.hidden_units],
            decoder_hidden: vec![self.hidden_units],
            ..VaeArchitecture::desk(cells, self.latent_dim)
        }
    }

    pub fn train_config(&self, cells: usize, seed: u64) -> VaeTrainConfig {
        VaeTrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            validation_fraction: self.validation_fraction,
            kl_weight: self.kl_weight.unwrap_or(1.0 / (2.0 * cells as f64)),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardDataConfig {
    pub grid_cells: usize,
    pub cell_size_m: f64,
    pub thickness_m: f64,
    pub well_counts: Vec<usize>,
    pub data_sd: f64,
    pub n_assimilations: usize,
    pub ensemble_size: usize,
    pub pca_training_count: usize,
    pub pca_energy: f64,
}

impl Default for HardDataConfig {
    fn default() -> Self {
        HardDataConfig {
            grid_cells: 60,
            cell_size_m: 100.0,
            thickness_m: 25.0,
            well_counts: vec![8, 20, 36],
            data_sd: 0.05,
            n_assimilations: 10,
            ensemble_size: 200,
            pca_training_count: 1000,
            pca_energy: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProductionConfig {
    pub grid_ni: usize,
    pub grid_nj: usize,
    pub cell_size_m: f64,
    pub thickness_m: f64,
    pub n_assimilations: usize,
    pub ensemble_size: usize,
    pub horizon_years: f64,
    pub relative_sd: f64,
    pub noise_floor: NoiseFloor,
    pub fluids: FluidRockConfig,
    pub parameterization: ParamKind,
    pub pca_training_count: usize,
    pub pca_energy: f64,
    pub vae: VaeSettings,
}

impl Default for ProductionConfig {
    fn default() -> Self {
        ProductionConfig {
            grid_ni: 30,
            grid_nj: 30,
            cell_size_m: 50.0,
            thickness_m: 10.0,
            n_assimilations: 8,
            ensemble_size: 100,
            horizon_years: 5.0,
            relative_sd: 0.05,
            noise_floor: NoiseFloor::default(),
            fluids: FluidRockConfig::default(),
            parameterization: ParamKind::Vae,
            pca_training_count: 1000,
            pca_energy: 1.0,
            vae: VaeSettings::default(),
        }
    }
}

impl ProductionConfig {
    fn grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.grid_ni, self.grid_nj, self.cell_size_m, self.cell_size_m, self.thickness_m)
    }

    fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            horizon_years: self.horizon_years,
            ..ScheduleConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Case1Config {
    pub seed: u64,
    pub prior: ChannelPriorConfig,
    pub hard: HardDataConfig,
    pub production: ProductionConfig,
    pub sweep: PerturbSweepConfig,
}

impl Default for Case1Config {
    fn default() -> Self {
        Case1Config {
            seed: 2024,
            prior: ChannelPriorConfig::default(),
            hard: HardDataConfig::default(),
            production: ProductionConfig::default(),
            sweep: PerturbSweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Case2Config {
    pub seed: u64,
    pub prior: ChannelPriorConfig,
    pub production: ProductionConfig,
    pub localization: LocalizationSpec,
}

impl Default for Case2Config {
    fn default() -> Self {
        Case2Config {
            seed: 2025,
            prior: ChannelPriorConfig {
                orientation_spread_deg: 0.0,
                ..ChannelPriorConfig::default()
            },
            production: ProductionConfig {
                grid_ni: 100,
                grid_nj: 20,
                // A narrower code and a larger corpus keep the dense decoder
                // from adding speckle on the 2000-cell grid.
                vae: VaeSettings {
                    latent_dim: 32,
                    training_count: 8000,
                    max_epochs: 12,
                    ..VaeSettings::default()
                },
                // Truncation keeps the grid-shaped codes smooth and
                // channel-like, which the Schur taper relies on.
                pca_energy: 0.8,
                ..ProductionConfig::default()
            },
            localization: LocalizationSpec {
                half_major_cells: 20.0,
                half_minor_cells: 5.0,
                angle_deg: 0.0,
            },
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn put(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn prior_with_seed(prior: &ChannelPriorConfig, seed: u64) -> ChannelPriorConfig {
    ChannelPriorConfig {
        seed: derive_seed(seed, "prior", 0),
        ..prior.clone()
    }
}

/// `n` wells on the most square lattice with `n` nodes, as uniform as the
/// grid aspect allows.
pub fn case1_hard_layout(grid: &Grid2D, n: usize) -> Result<Vec<WellSpec>> {
    if n == 0 || n > grid.len() {
        return Err(Error::config(format!("cannot place {n} wells on the grid")));
    }
    let aspect = grid.ni as f64 / grid.nj as f64;
    let (nc, nr) = (1..=n)
        .filter(|c| n.is_multiple_of(*c))
        .map(|c| (c, n / c))
        .min_by(|a, b| {
            let score = |(c, r): (usize, usize)| ((c as f64 / r as f64) / aspect).ln().abs();
            score(*a).total_cmp(&score(*b)).then(b.0.cmp(&a.0))
        })
        .expect("n >= 1 has a divisor");
    let mut wells = Vec::with_capacity(n);
    for r in 0..nr {
        for c in 0..nc {
            let i = ((c as f64 + 0.5) * grid.ni as f64 / nc as f64) as usize;
            let j = ((r as f64 + 0.5) * grid.nj as f64 / nr as f64) as usize;
            wells.push(WellSpec::producer(&format!("W{}", wells.len() + 1), i, j, 150.0));
        }
    }
    Ok(wells)
}

/// Four corner producers and one central injector.
pub fn case1_production_deck(grid: &Grid2D) -> Vec<WellSpec> {
    let (mi, mj) = (grid.ni - 1, grid.nj - 1);
    vec![
        WellSpec::producer("P1", 2.min(mi), 2.min(mj), 150.0),
        WellSpec::producer("P2", mi.saturating_sub(2), 2.min(mj), 150.0),
        WellSpec::producer("P3", 2.min(mi), mj.saturating_sub(2), 150.0),
        WellSpec::producer("P4", mi.saturating_sub(2), mj.saturating_sub(2), 150.0),
        WellSpec::injector("I1", grid.ni / 2, grid.nj / 2, 350.0),
    ]
}

/// Three injectors along the long axis, each surrounded by producers in a
/// five-spot-like arrangement: six producers in total.
pub fn case2_deck(grid: &Grid2D) -> Vec<WellSpec> {
    let at = |f: f64, n: usize| ((f * n as f64).round() as usize).min(n - 1);
    let (ni, nj) = (grid.ni, grid.nj);
    let mid = nj / 2;
    let (lo, hi) = (at(0.15, nj), at(0.85, nj).min(nj - 1));
    vec![
        WellSpec::producer("P1", 2.min(ni - 1), mid, 150.0),
        WellSpec::producer("P2", at(1.0 / 3.0, ni), lo, 150.0),
        WellSpec::producer("P3", at(1.0 / 3.0, ni), hi, 150.0),
        WellSpec::producer("P4", at(2.0 / 3.0, ni), lo, 150.0),
        WellSpec::producer("P5", at(2.0 / 3.0, ni), hi, 150.0),
        WellSpec::producer("P6", ni.saturating_sub(3), mid, 150.0),
        WellSpec::injector("I1", at(1.0 / 6.0, ni), mid, 350.0),
        WellSpec::injector("I2", at(0.5, ni), mid, 350.0),
        WellSpec::injector("I3", at(5.0 / 6.0, ni), mid, 350.0),
    ]
}

fn train_vae(
    settings: &VaeSettings,
    prior: &ChannelPriorConfig,
    grid: &Grid2D,
    seed: u64,
    out: &Path,
    exec: Execution,
) -> Result<VaeModel> {
    let training = generate_prior_from(prior, grid, 0, settings.training_count, exec)?;
    let arch = settings.architecture(grid.len());
    let cfg = settings.train_config(grid.len(), derive_seed(seed, "vae-training", 0));
    let (model, log) = vae_train(&arch, &cfg, &training, exec)?;
    put(out, "vae_training_log.csv", &log.to_csv())?;
    put(out, "vae_model.txt", &model.to_text())?;
    Ok(model)
}

fn build_param(
    kind: ParamKind,
    cfg: &ProductionConfig,
    prior: &ChannelPriorConfig,
    grid: &Grid2D,
    seed: u64,
    out: &Path,
    exec: Execution,
) -> Result<Box<dyn Parameterization>> {
    Ok(match kind {
        ParamKind::Vae => Box::new(train_vae(&cfg.vae, prior, grid, seed, out, exec)?),
        ParamKind::Pca => {
            let training = generate_prior_from(prior, grid, 0, cfg.pca_training_count, exec)?;
            Box::new(pca_fit(&training, cfg.pca_energy)?)
        }
    })
}

/// Table-2 protocol: facies observed at wells, PCA parameterization.
pub fn run_case1_hard(cfg: &Case1Config, out: &Path, exec: Execution) -> Result<Vec<(usize, MetricReport)>> {
    let h = &cfg.hard;
    let grid = Grid2D::new(h.grid_cells, h.grid_cells, h.cell_size_m, h.cell_size_m, h.thickness_m)?;
    let layouts = h
        .well_counts
        .iter()
        .map(|&n| case1_hard_layout(&grid, n))
        .collect::<Result<Vec<_>>>()?;
    let esmda = EsmdaConfig::constant(h.n_assimilations, h.ensemble_size, derive_seed(cfg.seed, "esmda", 1))?;
    let prior = prior_with_seed(&cfg.prior, cfg.seed);
    prior.validate()?;
    let dir = out.join("case1_hard");
    ensure_dir(&dir)?;

    let training = generate_prior_from(&prior, &grid, 0, h.pca_training_count, exec)?;
    let pca = pca_fit(&training, h.pca_energy)?;
    let truth = generate_prior_from(&prior, &grid, TRUTH_INDEX, 1, exec)?.remove(0);
    write_raster(dir.join("truth.txt"), &Raster::from_facies(&truth))?;
    let ensemble = generate_prior_from(&prior, &grid, ENSEMBLE_OFFSET, h.ensemble_size, exec)?;
    let z0 = encode_ensemble(&pca, &ensemble, exec)?;

    let mut table = String::from("wells,prior_failure_percent,posterior_failure_percent\n");
    let mut reports = Vec::new();
    for wells in layouts {
        let obs = facies_observations(&truth, &wells, h.data_sd)?;
        let forward = FaciesDataModel { wells: wells.clone() };
        let hm = run_history_match(&z0, &pca, &forward, &obs, &esmda, &UpdateScheme::Global, exec)?;
        let report = MetricReport::from_history(&format!("wells_{}", wells.len()), &hm, Some((&wells, &obs)))?;
        report.write(&dir, &grid)?;
        let (p, q) = report.failure_percent.expect("hard-data report");
        let _ = writeln!(table, "{},{p},{q}", wells.len());
        reports.push((wells.len(), report));
    }
    put(&dir, "failure_table.csv", &table)?;
    Ok(reports)
}

/// Production history match plus the latent perturbation sweep on the same
/// parameterization.
pub fn run_case1_production(
    cfg: &Case1Config,
    out: &Path,
    exec: Execution,
) -> Result<(MetricReport, SweepResult)> {
    let p = &cfg.production;
    let grid = p.grid()?;
    let prior = prior_with_seed(&cfg.prior, cfg.seed);
    prior.validate()?;
    cfg.sweep.validate()?;
    let deck = case1_production_deck(&grid);
    let model = ReservoirModel {
        fluids: p.fluids.clone(),
        wells: deck,
        schedule: p.schedule(),
    };
    crate::sim::validate_deck(&model.wells, &grid)?;
    p.fluids.validate()?;
    model.schedule.validate()?;
    let esmda = EsmdaConfig::constant(p.n_assimilations, p.ensemble_size, derive_seed(cfg.seed, "esmda", 2))?;
    let dir = out.join("case1_production");
    ensure_dir(&dir)?;

    let param = build_param(p.parameterization, p, &prior, &grid, cfg.seed, &dir, exec)?;
    let truth = generate_prior_from(&prior, &grid, TRUTH_INDEX, 1, exec)?.remove(0);
    write_raster(dir.join("truth.txt"), &Raster::from_facies(&truth))?;
    let clean = model.run(&truth)?;
    let obs = add_noise(&clean, p.relative_sd, p.noise_floor, derive_seed(cfg.seed, "observation-noise", 2))?;
    put(&dir, "observed.csv", &obs.to_csv())?;

    let ensemble = generate_prior_from(&prior, &grid, ENSEMBLE_OFFSET, p.ensemble_size, exec)?;
    let z0 = encode_ensemble(param.as_ref(), &ensemble, exec)?;
    let hm = run_history_match(&z0, param.as_ref(), &model, &obs, &esmda, &UpdateScheme::Global, exec)?;
    let report = MetricReport::from_history("production", &hm, None)?;
    report.write(&dir, &grid)?;

    // Sweep: C_z^{1/2} from the latent codes of the training-range
    // realizations, perturbations around unseen bases.
    let sample = generate_prior_from(&prior, &grid, 0, cfg.sweep.sample_count.min(1000), exec)?;
    let sqrt_cz = latent_sqrt_model(&encode_ensemble(param.as_ref(), &sample, exec)?)?;
    let bases = generate_prior_from(&prior, &grid, SWEEP_OFFSET, cfg.sweep.sample_count, exec)?;
    let sweep_cfg = PerturbSweepConfig {
        seed: derive_seed(cfg.seed, "sweep", 0),
        ..cfg.sweep.clone()
    };
    let sweep = perturbation_sweep(param.as_ref(), &sqrt_cz, &bases, &sweep_cfg, exec)?;
    put(&dir, "sweep.csv", &sweep.to_csv())?;
    Ok((report, sweep))
}

#[derive(Debug, Clone)]
pub struct Case1Outcome {
    pub hard: Vec<(usize, MetricReport)>,
    pub production: MetricReport,
    pub sweep: SweepResult,
}

pub fn run_case1(cfg: &Case1Config, out: &Path, exec: Execution) -> Result<Case1Outcome> {
    let hard = run_case1_hard(cfg, out, exec)?;
    let (production, sweep) = run_case1_production(cfg, out, exec)?;
    Ok(Case1Outcome {
        hard,
        production,
        sweep,
    })
}

#[derive(Debug, Clone)]
pub struct Case2Outcome {
    /// `(variant name, report)`: vae_global, vae_local, vae_local_smooth, pca_schur.
    pub variants: Vec<(String, MetricReport)>,
    /// Members of the local-analysis posterior whose isolated-cell count
    /// does not grow under `vae_smooth`, and the member count.
    pub smoothing_not_worse: (usize, usize),
}

impl Case2Outcome {
    pub fn variant(&self, name: &str) -> Option<&MetricReport> {
        self.variants.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

/// Localization comparison on the elongated grid.
pub fn run_case2(cfg: &Case2Config, out: &Path, exec: Execution) -> Result<Case2Outcome> {
    let p = &cfg.production;
    let grid = p.grid()?;
    let prior = prior_with_seed(&cfg.prior, cfg.seed);
    prior.validate()?;
    cfg.localization.validate()?;
    let model = ReservoirModel {
        fluids: p.fluids.clone(),
        wells: case2_deck(&grid),
        schedule: p.schedule(),
    };
    crate::sim::validate_deck(&model.wells, &grid)?;
    p.fluids.validate()?;
    model.schedule.validate()?;
    let esmda = EsmdaConfig::constant(p.n_assimilations, p.ensemble_size, derive_seed(cfg.seed, "esmda", 3))?;
    let dir = out.join("case2");
    ensure_dir(&dir)?;

    let vae = train_vae(&p.vae, &prior, &grid, cfg.seed, &dir, exec)?;
    let training = generate_prior_from(&prior, &grid, 0, p.pca_training_count, exec)?;
    let pca = pca_fit(&training, p.pca_energy)?;
    drop(training);

    let truth = generate_prior_from(&prior, &grid, TRUTH_INDEX, 1, exec)?.remove(0);
    write_raster(dir.join("truth.txt"), &Raster::from_facies(&truth))?;
    let obs = add_noise(&model.run(&truth)?, p.relative_sd, p.noise_floor, derive_seed(cfg.seed, "observation-noise", 3))?;
    put(&dir, "observed.csv", &obs.to_csv())?;
    let anchors = obs.anchors();
    let row_sums = crate::localization::taper_row_sums(&grid, &anchors, &cfg.localization);
    put(&dir, "taper_row_sums.txt", &Raster::new(grid.ni, grid.nj, row_sums)?.to_text())?;

    let ensemble = generate_prior_from(&prior, &grid, ENSEMBLE_OFFSET, p.ensemble_size, exec)?;
    let z_vae = encode_ensemble(&vae, &ensemble, exec)?;
    let z_pca = encode_ensemble(&pca, &ensemble, exec)?;
    let spec = cfg.localization;
    let runs: [(&str, &dyn Parameterization, &DMatrix<f64>, UpdateScheme); 4] = [
        ("vae_global", &vae, &z_vae, UpdateScheme::Global),
        ("vae_local", &vae, &z_vae, UpdateScheme::LocalAnalysis { spec, smooth: false }),
        ("vae_local_smooth", &vae, &z_vae, UpdateScheme::LocalAnalysis { spec, smooth: true }),
        ("pca_schur", &pca, &z_pca, UpdateScheme::Schur(spec)),
    ];
    let mut variants = Vec::new();
    let mut smoothing_not_worse = (0, 0);
    for (name, param, z0, scheme) in runs {
        let hm = run_history_match(z0, param, &model, &obs, &esmda, &scheme, exec)?;
        if name == "vae_local" {
            let post = &hm.posterior().facies;
            let ok = exec.try_map(post.len(), |j| {
                Ok(vae_smooth(&vae, &post[j])?.isolated_cells() <= post[j].isolated_cells())
            })?;
            smoothing_not_worse = (ok.iter().filter(|&&b| b).count(), ok.len());
        }
        let report = MetricReport::from_history(name, &hm, None)?;
        report.write(&dir, &grid)?;
        variants.push((name.to_string(), report));
    }
    let mut table = String::from("variant,prior_median_objective,posterior_median_objective,mean_normalized_variance,mean_isolated_cells\n");
    for (name, r) in &variants {
        let _ = writeln!(
            table,
            "{name},{},{},{},{}",
            r.prior_box.median, r.posterior_box.median, r.normalized_variance.mean, r.isolated_cells_mean
        );
    }
    put(&dir, "comparison.csv", &table)?;
    put(
        &dir,
        "smoothing_check.csv",
        &format!("members_not_worse,members\n{},{}\n", smoothing_not_worse.0, smoothing_not_worse.1),
    )?;
    Ok(Case2Outcome {
        variants,
        smoothing_not_worse,
    })
}
