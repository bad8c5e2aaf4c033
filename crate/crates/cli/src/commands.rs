//! Subcommands. Each validates its whole configuration, then computes, then
//! writes its outputs and a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use latentmda::esmda::{run_history_match, UpdateScheme};
use latentmda::facies::{
    generate_prior_from, read_raster, FaciesRealization, Grid2D, Raster,
};
use latentmda::metrics::{
    facies_failure_rate, latent_sqrt_model, mean_facies, normalized_variance, perturbation_sweep,
    run_case1, run_case2, MetricReport, PerturbSweepConfig,
};
use latentmda::observation::ObservationSet;
use latentmda::param::{encode_ensemble, pca_fit, Parameterization, PcaModel};
use latentmda::rng::derive_seed;
use latentmda::sim::{
    add_noise, facies_observations, observe_facies, validate_deck, FaciesDataModel,
    ReservoirModel, WellSpec,
};
use latentmda::vae::{vae_train, VaeModel};
use latentmda::{esmda::ForwardModel, Execution};

use crate::config::{CaseName, DataKind, DeckSection, Loaded, ModelKind};
use crate::CliError;

/// Collects output files so they are written only after all computation.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, text: impl Into<String>) {
        self.files.push((name.into(), text.into()));
    }

    fn add_ensemble(&mut self, sub: &str, xs: &[FaciesRealization]) {
        for (k, x) in xs.iter().enumerate() {
            self.add(format!("{sub}/real_{k:05}.txt"), Raster::from_facies(x).to_text());
        }
    }

    fn write(self, command: &str, loaded: &Loaded) -> Result<(), CliError> {
        let mut manifest = format!(
            "command = \"{command}\"\nseed = {}\nconfig_sha256 = \"{}\"\nfiles = [\n",
            loaded.seed, loaded.hash
        );
        for (name, text) in &self.files {
            let path = self.dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
            let _ = writeln!(manifest, "  \"{name}\",");
        }
        manifest.push_str("]\n");
        let path = self.dir.join("manifest.toml");
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        std::fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))
    }
}

/// Raster files of a directory in name order.
fn raster_paths(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::config(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::config(format!("no raster files in {}", dir.display())));
    }
    Ok(paths)
}

fn read_ensemble(paths: &[PathBuf], grid: Grid2D) -> Result<Vec<FaciesRealization>, CliError> {
    paths
        .iter()
        .map(|p| Ok(read_raster(p)?.to_facies(grid)?))
        .collect()
}

fn load_model(kind: ModelKind, path: &Path) -> Result<Box<dyn Parameterization>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(match kind {
        ModelKind::Pca => Box::new(PcaModel::from_text(&text)?),
        ModelKind::Vae => Box::new(VaeModel::from_text(&text)?),
    })
}

fn check_deck(deck: &DeckSection, grid: &Grid2D) -> Result<(), CliError> {
    validate_deck(&deck.wells, grid)?;
    deck.fluids.validate()?;
    deck.schedule.validate()?;
    Ok(())
}

pub fn generate_prior(l: &Loaded, out: &Path, exec: Execution) -> Result<(), CliError> {
    let grid = l.grid()?;
    let s = l.section(&l.cfg.prior, "prior")?;
    let mut channels = s.channels.clone();
    channels.seed = derive_seed(l.seed, "prior", 0);
    channels.validate()?;
    if s.count == 0 {
        return Err(CliError::config("[prior] count must be at least 1"));
    }
    let xs = generate_prior_from(&channels, &grid, s.first_index, s.count, exec)?;
    let mut o = Outputs::new(out);
    o.add_ensemble("realizations", &xs);
    o.write("generate-prior", l)
}

fn training_set(l: &Loaded) -> Result<(Grid2D, Vec<PathBuf>), CliError> {
    let grid = l.grid()?;
    let fit = l.section(&l.cfg.fit, "fit")?;
    let dir = l.existing_dir(&fit.training_dir, "training directory")?;
    Ok((grid, raster_paths(&dir)?))
}

pub fn fit_pca(l: &Loaded, out: &Path) -> Result<(), CliError> {
    let (grid, paths) = training_set(l)?;
    let energy = l.cfg.pca.as_ref().map_or(1.0, |p| p.energy_kept);
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(CliError::config("[pca] energy_kept must lie in (0, 1]"));
    }
    let training = read_ensemble(&paths, grid)?;
    let model = pca_fit(&training, energy)?;
    let mut o = Outputs::new(out);
    o.add("pca_model.txt", model.to_text());
    o.add(
        "pca_summary.csv",
        format!("training_count,rank,energy_kept\n{},{},{}\n", training.len(), model.rank(), model.energy_kept()),
    );
    o.write("fit-pca", l)
}

pub fn fit_vae(l: &Loaded, out: &Path, exec: Execution) -> Result<(), CliError> {
    let (grid, paths) = training_set(l)?;
    let settings = l.cfg.vae.clone().unwrap_or_default();
    let arch = settings.architecture(grid.len());
    let cfg = settings.train_config(grid.len(), derive_seed(l.seed, "vae-training", 0));
    arch.validate()?;
    cfg.validate()?;
    let training = read_ensemble(&paths, grid)?;
    let (model, log) = vae_train(&arch, &cfg, &training, exec)?;
    let mut o = Outputs::new(out);
    o.add("vae_model.txt", model.to_text());
    o.add("vae_training_log.csv", log.to_csv());
    o.write("fit-vae", l)
}

pub fn assimilate(l: &Loaded, out: &Path, exec: Execution) -> Result<(), CliError> {
    // Validation.
    let grid = l.grid()?;
    let a = l.section(&l.cfg.assimilate, "assimilate")?;
    let esmda = l
        .section(&l.cfg.esmda, "esmda")?
        .config(derive_seed(l.seed, "esmda", 0))?;
    let deck = l.section(&l.cfg.deck, "deck")?;
    let scheme = UpdateScheme::from_name(&a.localizer, a.localization)?;
    match a.data {
        DataKind::Production => check_deck(deck, &grid)?,
        DataKind::Facies => latentmda::sim::check_wells_on_grid(&deck.wells, &grid)?,
    }
    if !(a.facies_sd > 0.0 && a.relative_sd >= 0.0) {
        return Err(CliError::config("data sd settings must be positive"));
    }
    let model_path = l.existing_file(&a.model_path, "model")?;
    let prior_paths = raster_paths(&l.existing_dir(&a.prior_dir, "prior directory")?)?;
    if prior_paths.len() < esmda.ensemble_size {
        return Err(CliError::config(format!(
            "prior directory holds {} realizations, ensemble needs {}",
            prior_paths.len(),
            esmda.ensemble_size
        )));
    }
    let obs_path = a
        .observations_path
        .as_ref()
        .map(|p| l.existing_file(p, "observations"))
        .transpose()?;
    let truth_path = a
        .truth_path
        .as_ref()
        .map(|p| l.existing_file(p, "truth raster"))
        .transpose()?;
    if obs_path.is_none() && truth_path.is_none() {
        return Err(CliError::config("[assimilate] needs observations_path or truth_path"));
    }

    // Compute.
    let param = load_model(a.model_kind, &model_path)?;
    let prior = read_ensemble(&prior_paths[..esmda.ensemble_size], grid)?;
    let truth = truth_path
        .map(|p| Ok::<_, CliError>(read_raster(&p)?.to_facies(grid)?))
        .transpose()?;
    let wells: &[WellSpec] = &deck.wells;
    let reservoir = ReservoirModel {
        fluids: deck.fluids.clone(),
        wells: wells.to_vec(),
        schedule: deck.schedule.clone(),
    };
    let facies_model = FaciesDataModel { wells: wells.to_vec() };
    let forward: &dyn ForwardModel = match a.data {
        DataKind::Production => &reservoir,
        DataKind::Facies => &facies_model,
    };
    let obs = match (&obs_path, &truth) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let anchor = |name: &str| wells.iter().find(|w| w.name == name).map(|w| w.cell());
            ObservationSet::from_csv(&text, anchor)?
        }
        (None, Some(x)) => match a.data {
            DataKind::Production => add_noise(
                &reservoir.run(x)?,
                a.relative_sd,
                a.noise_floor,
                derive_seed(l.seed, "observation-noise", 0),
            )?,
            DataKind::Facies => facies_observations(x, wells, a.facies_sd)?,
        },
        (None, None) => unreachable!("checked above"),
    };
    let z0 = encode_ensemble(param.as_ref(), &prior, exec)?;
    let hm = run_history_match(&z0, param.as_ref(), forward, &obs, &esmda, &scheme, exec)?;
    let hard = (a.data == DataKind::Facies).then_some((wells, &obs));
    let report = MetricReport::from_history("assimilate", &hm, hard)?;

    let mut o = Outputs::new(out);
    o.add("observations.csv", obs.to_csv());
    o.add_ensemble("posterior", &hm.posterior().facies);
    for (name, text) in report.files(&grid)? {
        o.add(name, text);
    }
    o.write("assimilate", l)
}

pub fn perturb_sweep(l: &Loaded, out: &Path, exec: Execution) -> Result<(), CliError> {
    let grid = l.grid()?;
    let s = l.section(&l.cfg.sweep, "sweep")?;
    let model_path = l.existing_file(&s.model_path, "model")?;
    let bases = raster_paths(&l.existing_dir(&s.bases_dir, "bases directory")?)?;
    let sample = raster_paths(&l.existing_dir(&s.latent_sample_dir, "latent sample directory")?)?;
    let cfg = PerturbSweepConfig {
        gammas: s.gammas.clone().unwrap_or_else(|| PerturbSweepConfig::default().gammas),
        sample_count: bases.len(),
        seed: derive_seed(l.seed, "sweep", 0),
    };
    cfg.validate()?;

    let param = load_model(s.model_kind, &model_path)?;
    let sqrt_cz = latent_sqrt_model(&encode_ensemble(param.as_ref(), &read_ensemble(&sample, grid)?, exec)?)?;
    let result = perturbation_sweep(param.as_ref(), &sqrt_cz, &read_ensemble(&bases, grid)?, &cfg, exec)?;
    let mut o = Outputs::new(out);
    o.add("sweep.csv", result.to_csv());
    o.write("perturb-sweep", l)
}

pub fn metrics(l: &Loaded, out: &Path) -> Result<(), CliError> {
    let grid = l.grid()?;
    let m = l.section(&l.cfg.metrics, "metrics")?;
    let prior_paths = raster_paths(&l.existing_dir(&m.prior_dir, "prior directory")?)?;
    let post_paths = raster_paths(&l.existing_dir(&m.posterior_dir, "posterior directory")?)?;
    let truth_path = m
        .truth_path
        .as_ref()
        .map(|p| l.existing_file(p, "truth raster"))
        .transpose()?;
    let wells = match (&truth_path, &l.cfg.deck) {
        (Some(_), Some(d)) => {
            latentmda::sim::check_wells_on_grid(&d.wells, &grid)?;
            Some(d.wells.clone())
        }
        (Some(_), None) => return Err(CliError::config("truth_path needs a [deck] with wells")),
        _ => None,
    };

    let prior = read_ensemble(&prior_paths, grid)?;
    let post = read_ensemble(&post_paths, grid)?;
    let nv = normalized_variance(&prior, &post)?;
    let mut summary = String::from("metric,value\n");
    let _ = writeln!(summary, "mean_normalized_variance,{}", nv.mean);
    if let (Some(p), Some(w)) = (&truth_path, &wells) {
        let truth = read_raster(p)?.to_facies(grid)?;
        let t = observe_facies(&truth, w)?;
        let _ = writeln!(summary, "prior_failure_percent,{}", facies_failure_rate(&prior, w, &t)?);
        let _ = writeln!(summary, "posterior_failure_percent,{}", facies_failure_rate(&post, w, &t)?);
    }
    let mut o = Outputs::new(out);
    o.add("metrics_summary.csv", summary);
    o.add("mean_facies.txt", Raster::from_field(&grid, &mean_facies(&post))?.to_text());
    o.add("normalized_variance.txt", Raster::from_field(&grid, &nv.ratios)?.to_text());
    o.write("metrics", l)
}

pub fn experiment(l: &Loaded, out: &Path, exec: Execution) -> Result<(), CliError> {
    let e = l.section(&l.cfg.experiment, "experiment")?;
    // The drivers write their own artifact trees.
    match e.case {
        CaseName::Case1 => {
            let mut cfg = l.cfg.case1.clone().unwrap_or_default();
            cfg.seed = l.seed;
            run_case1(&cfg, out, exec)?;
        }
        CaseName::Case2 => {
            let mut cfg = l.cfg.case2.clone().unwrap_or_default();
            cfg.seed = l.seed;
            run_case2(&cfg, out, exec)?;
        }
    }
    let o = Outputs::new(out);
    o.write("experiment", l)
}

