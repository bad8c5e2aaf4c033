//! TOML run configuration. Keys carry their units (`bhp_bar`, `cell_size_m`).

use std::path::{Path, PathBuf};

use latentmda::esmda::{inflation_schedule, EsmdaConfig, DEFAULT_ENERGY};
use latentmda::facies::{ChannelPriorConfig, Grid2D};
use latentmda::localization::LocalizationSpec;
use latentmda::metrics::{Case1Config, Case2Config, VaeSettings};
use latentmda::sim::{FluidRockConfig, NoiseFloor, ScheduleConfig, WellSpec};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub grid: Option<GridSection>,
    pub prior: Option<PriorSection>,
    pub fit: Option<FitSection>,
    pub pca: Option<PcaSection>,
    pub vae: Option<VaeSettings>,
    pub deck: Option<DeckSection>,
    pub esmda: Option<EsmdaSection>,
    pub assimilate: Option<AssimilateSection>,
    pub sweep: Option<SweepSection>,
    pub metrics: Option<MetricsSection>,
    pub experiment: Option<ExperimentSection>,
    pub case1: Option<Case1Config>,
    pub case2: Option<Case2Config>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub ni: usize,
    pub nj: usize,
    pub cell_size_m: f64,
    #[serde(default = "default_thickness")]
    pub thickness_m: f64,
}

fn default_thickness() -> f64 {
    10.0
}

impl GridSection {
    pub fn grid(&self) -> Result<Grid2D, CliError> {
        Ok(Grid2D::new(self.ni, self.nj, self.cell_size_m, self.cell_size_m, self.thickness_m)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub count: usize,
    #[serde(default)]
    pub first_index: u64,
    /// Generator settings; the seed inside is replaced by one derived from
    /// the run seed.
    #[serde(default)]
    pub channels: ChannelPriorConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub training_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaSection {
    #[serde(default = "one")]
    pub energy_kept: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeckSection {
    pub wells: Vec<WellSpec>,
    #[serde(default)]
    pub fluids: FluidRockConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsmdaSection {
    /// Constant inflation with this many assimilations.
    pub n_assimilations: Option<usize>,
    /// Explicit inflation schedule; mutually exclusive with `n_assimilations`.
    pub alphas: Option<Vec<f64>>,
    pub ensemble_size: usize,
    #[serde(default = "default_energy")]
    pub energy: f64,
}

fn default_energy() -> f64 {
    DEFAULT_ENERGY
}

impl EsmdaSection {
    pub fn config(&self, seed: u64) -> Result<EsmdaConfig, CliError> {
        let alphas = match (&self.alphas, self.n_assimilations) {
            (Some(a), None) => a.clone(),
            (None, Some(n)) => inflation_schedule(n)?,
            _ => {
                return Err(CliError::config(
                    "[esmda] needs exactly one of n_assimilations or alphas",
                ))
            }
        };
        let cfg = EsmdaConfig {
            alphas,
            ensemble_size: self.ensemble_size,
            energy: self.energy,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Pca,
    Vae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Production,
    Facies,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssimilateSection {
    pub model_kind: ModelKind,
    pub model_path: PathBuf,
    pub prior_dir: PathBuf,
    pub data: DataKind,
    /// Observed data; when absent, synthetic data are drawn from `truth_path`.
    pub observations_path: Option<PathBuf>,
    pub truth_path: Option<PathBuf>,
    #[serde(default = "default_localizer")]
    pub localizer: String,
    pub localization: Option<LocalizationSpec>,
    #[serde(default = "default_facies_sd")]
    pub facies_sd: f64,
    #[serde(default = "default_relative_sd")]
    pub relative_sd: f64,
    #[serde(default)]
    pub noise_floor: NoiseFloor,
}

fn default_localizer() -> String {
    "none".into()
}

fn default_facies_sd() -> f64 {
    0.05
}

fn default_relative_sd() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub model_kind: ModelKind,
    pub model_path: PathBuf,
    /// Realizations perturbed around; not part of the training set.
    pub bases_dir: PathBuf,
    /// Realizations whose codes estimate the latent covariance.
    pub latent_sample_dir: PathBuf,
    pub gammas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub prior_dir: PathBuf,
    pub posterior_dir: PathBuf,
    /// With a deck, enables the well facies failure rate.
    pub truth_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseName {
    Case1,
    Case2,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub case: CaseName,
}

/// A parsed configuration with its resolved seed and provenance hash.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub cfg: RunConfig,
    pub seed: u64,
    pub hash: String,
    base: PathBuf,
}

impl Loaded {
    pub fn load(path: &Path, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), seed_flag)
    }

    pub fn parse(text: &str, base: &Path, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        let seed = seed_flag
            .or(cfg.seed)
            .ok_or_else(|| CliError::config("a seed is required (config `seed` or --seed)"))?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(format!("\nresolved_seed={seed}\n").as_bytes());
        Ok(Loaded {
            cfg,
            seed,
            hash: hex::encode(h.finalize()),
            base: base.to_path_buf(),
        })
    }

    /// Paths in the config are relative to the config file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn existing_file(&self, p: &Path, what: &str) -> Result<PathBuf, CliError> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(full)
        } else {
            Err(CliError::config(format!("{what} {} does not exist", full.display())))
        }
    }

    pub fn existing_dir(&self, p: &Path, what: &str) -> Result<PathBuf, CliError> {
        let full = self.resolve(p);
        if full.is_dir() {
            Ok(full)
        } else {
            Err(CliError::config(format!("{what} {} does not exist", full.display())))
        }
    }

    pub fn grid(&self) -> Result<Grid2D, CliError> {
        self.cfg
            .grid
            .as_ref()
            .ok_or_else(|| CliError::config("missing [grid] section"))?
            .grid()
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        s.as_ref()
            .ok_or_else(|| CliError::config(format!("missing [{name}] section")))
    }
}
