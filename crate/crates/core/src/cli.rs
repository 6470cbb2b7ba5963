//! Command-line surface: run configuration and the `fit`, `forecast`,
//! `validate`, `national` and `simulate` commands.
//!
//! The run configuration is a TOML file. Relative paths in `[paths]` resolve
//! against the directory holding the file. The output directory is taken
//! from `--output-dir`, then `SCM_OUTPUT_DIR`, then `[paths] output_dir`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{grid_graph, AreaGraph, InteractionType};
use crate::inference::{forecast_horizon, FitSettings, InferenceMode};
use crate::io::{self, sha256_hex, Manifest, OutputStage};
use crate::model::{LatentModel, ModelConfig, ModelId};
use crate::national::national_distribution;
use crate::panel::ObservationPanel;
use crate::scoring::ScoringOptions;
use crate::synthetic::{simulate_model, simulation_hyper, uniform_populations, Intercepts};
use crate::validation::{
    build_cv_plan_with, build_mask, run_validation, DEFAULT_BAND_YEARS, DEFAULT_FRACTIONS, DEFAULT_MAX_FOLDS,
    DEFAULT_MIN_FIT_YEARS,
};

pub const OUTPUT_DIR_ENV: &str = "SCM_OUTPUT_DIR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub adjacency: Option<PathBuf>,
    pub counts: Option<PathBuf>,
    pub populations: Option<PathBuf>,
    /// Projected populations for forecast years.
    pub projections: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model: String,
    /// `I`–`IV`; ignored by the additive baseline.
    pub interaction: String,
    pub shared_interaction_precision: bool,
    pub num_rho: usize,
    pub sd_prior_upper: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::new(ModelId::Model1);
        Self {
            model: d.model.to_string(),
            interaction: "II".into(),
            shared_interaction_precision: d.shared_interaction_precision,
            num_rho: d.num_rho,
            sd_prior_upper: d.sd_prior_upper,
            gamma_shape: d.gamma_shape,
            gamma_rate: d.gamma_rate,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let model: ModelId = self.model.parse()?;
        let mut cfg = ModelConfig::new(model);
        if model != ModelId::AdditiveBaseline {
            cfg.interaction = Some(self.interaction.parse::<InteractionType>()?);
        }
        cfg.shared_interaction_precision = self.shared_interaction_precision;
        cfg.num_rho = self.num_rho;
        cfg.sd_prior_upper = self.sd_prior_upper;
        cfg.gamma_shape = self.gamma_shape;
        cfg.gamma_rate = self.gamma_rate;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    /// Cumulative fraction of areas with incidence, per band.
    pub fractions: Vec<f64>,
    pub band_years: usize,
    pub mask_seed: u64,
    pub horizon: usize,
    pub max_folds: usize,
    pub min_fit_years: usize,
}

impl Default for HarnessSection {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            band_years: DEFAULT_BAND_YEARS,
            mask_seed: 1,
            horizon: 3,
            max_folds: DEFAULT_MAX_FOLDS,
            min_fit_years: DEFAULT_MIN_FIT_YEARS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NationalSection {
    /// Areas to aggregate; all when absent.
    pub areas: Option<Vec<usize>>,
    /// Fit on the panel with the `[harness]` mask applied; observed totals
    /// still come from the unmasked panel.
    pub apply_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// Lattice `[rows, cols]` used when no adjacency file is configured.
    pub lattice: Vec<usize>,
    pub first_year: i32,
    pub num_years: usize,
    /// Extra years whose populations are written as projections.
    pub projection_years: usize,
    pub population: f64,
    pub seed: u64,
    pub intercept_incidence: f64,
    pub intercept_mortality: f64,
    /// Hyperparameter values by name (`tau_kappa`, `delta`, ...); unnamed
    /// ones take [`default_simulation_value`](crate::synthetic::default_simulation_value).
    pub hyper: BTreeMap<String, f64>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let i = Intercepts::default();
        Self {
            lattice: vec![3, 4],
            first_year: 2001,
            num_years: 19,
            projection_years: 0,
            population: 1e5,
            seed: 1,
            intercept_incidence: i.incidence,
            intercept_mortality: i.mortality,
            hyper: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsSection,
    pub model: ModelSection,
    pub fit: FitSettings,
    pub forecast: ForecastSection,
    pub harness: HarnessSection,
    pub scoring: ScoringOptions,
    pub national: NationalSection,
    pub simulate: SimulateSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    /// SHA-256 of the configuration without the output directory, so runs
    /// that differ only in where they write share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = None;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

impl PathsSection {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.adjacency, &mut self.counts, &mut self.populations, &mut self.projections, &mut self.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scm", version, about = "Shared component models for incidence and mortality")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Sampler seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `mcmc` or `eb`.
    #[arg(long)]
    pub mode: Option<InferenceMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the panel and write per-cell rate summaries.
    Fit(Common),
    /// Fit and forecast `horizon` years ahead.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Mask, refit per fold and score.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// National incidence distribution per year.
    National {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Simulate a panel with known truth.
    Simulate(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Forecast { .. } => "forecast",
            Command::Validate { .. } => "validate",
            Command::National { .. } => "national",
            Command::Simulate(_) => "simulate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Fit(c) | Command::Simulate(c) => c,
            Command::Forecast { common, .. } | Command::Validate { common, .. } | Command::National { common, .. } => {
                common
            }
        }
    }

    fn horizon(&self) -> Option<usize> {
        match self {
            Command::Forecast { horizon, .. } | Command::Validate { horizon, .. } | Command::National { horizon, .. } => {
                *horizon
            }
            _ => None,
        }
    }
}

/// Loads the configuration of `cmd` and applies its overrides.
pub fn effective_config(cmd: &Command) -> Result<RunConfig> {
    let c = cmd.common();
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        cfg.paths.output_dir = Some(PathBuf::from(dir));
    }
    if let Some(dir) = &c.output_dir {
        cfg.paths.output_dir = Some(dir.clone());
    }
    if let Some(seed) = c.seed {
        match cmd {
            Command::Simulate(_) => cfg.simulate.seed = seed,
            _ => cfg.fit.seed = seed,
        }
    }
    if let Some(mode) = c.mode {
        cfg.fit.mode = mode;
    }
    match (cmd, cmd.horizon()) {
        (Command::Validate { .. }, Some(h)) => cfg.harness.horizon = h,
        (_, Some(h)) => cfg.forecast.horizon = h,
        _ => {}
    }
    Ok(cfg)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("[paths] {key} is required")))
}

fn load_inputs(cfg: &RunConfig) -> Result<(AreaGraph, ObservationPanel)> {
    let graph = io::load_adjacency(required(&cfg.paths.adjacency, "adjacency")?)?;
    let panel = io::load_panel(required(&cfg.paths.counts, "counts")?, cfg.paths.populations.as_deref())?;
    if graph.num_areas() != panel.num_areas() {
        return Err(Error::Panel(format!(
            "adjacency has {} areas, counts have {}",
            graph.num_areas(),
            panel.num_areas()
        )));
    }
    Ok((graph, panel))
}

fn projections(cfg: &RunConfig, panel: &ObservationPanel, horizon: usize) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let path = cfg
        .paths
        .projections
        .as_deref()
        .ok_or_else(|| Error::Config("forecasting needs [paths] projections".into()))?;
    io::load_projections(path, panel, horizon)
}

/// Runs `cmd` with configuration `cfg`, writing into the output directory.
/// Returns the manifest. Nothing is left behind on failure.
pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<Manifest> {
    let start = Instant::now();
    let out = cfg.paths.output_dir.as_deref().ok_or_else(|| {
        Error::Config(format!("no output directory: set [paths] output_dir, {OUTPUT_DIR_ENV} or --output-dir"))
    })?;
    let model_cfg = cfg.model.to_config()?;
    let mut stage = OutputStage::new(out)?;
    let mut seeds = BTreeMap::new();
    let unit = cfg.scoring.rate_unit;

    match cmd {
        Command::Fit(_) | Command::Forecast { .. } => {
            let (graph, panel) = load_inputs(cfg)?;
            let horizon = if matches!(cmd, Command::Fit(_)) { 0 } else { cfg.forecast.horizon };
            if matches!(cmd, Command::Forecast { .. }) && horizon == 0 {
                return Err(Error::Config("forecast needs a horizon of at least 1".into()));
            }
            let pops = projections(cfg, &panel, horizon)?;
            let samples = forecast_horizon::<f64>(&model_cfg, &graph, &panel, horizon, &pops, &cfg.fit)?;
            seeds.insert("fit".into(), cfg.fit.seed);
            stage.write_with("fit_summary.csv", |w| io::write_fit_summary(&samples, &panel, unit, w))?;
            stage.write_with("hyperparameters.csv", |w| io::write_hyper_summary(&samples, w))?;
            stage.write_with("diagnostics.csv", |w| io::write_diagnostics(&samples, w))?;
        }
        Command::Validate { .. } => {
            let (graph, panel) = load_inputs(cfg)?;
            let h = &cfg.harness;
            let mask =
                build_mask(panel.num_areas(), panel.first_year(), panel.num_years(), &h.fractions, h.band_years, h.mask_seed)?;
            let plan =
                build_cv_plan_with(panel.first_year(), panel.last_year(), h.horizon, h.max_folds, h.min_fit_years)?;
            let report = run_validation::<f64>(&model_cfg, &graph, &panel, &mask, &plan, &cfg.fit, &cfg.scoring)?;
            seeds.insert("mask".into(), h.mask_seed);
            for f in &report.folds {
                seeds.insert(format!("fold{}", f.fold.index + 1), f.seed);
            }
            stage.write_with("mask.csv", |w| io::write_mask(&mask, w))?;
            stage.write_with("folds.csv", |w| io::write_folds(&report, w))?;
            stage.write_with("score_cells.csv", |w| io::write_score_cells(&report.scores, w))?;
            stage.write_with("score_groups.csv", |w| io::write_score_groups(&report.scores, w))?;
        }
        Command::National { .. } => {
            let (graph, panel) = load_inputs(cfg)?;
            let fitted = if cfg.national.apply_mask {
                let h = &cfg.harness;
                seeds.insert("mask".into(), h.mask_seed);
                let mask = build_mask(
                    panel.num_areas(),
                    panel.first_year(),
                    panel.num_years(),
                    &h.fractions,
                    h.band_years,
                    h.mask_seed,
                )?;
                stage.write_with("mask.csv", |w| io::write_mask(&mask, w))?;
                mask.apply(&panel)?
            } else {
                panel.clone()
            };
            let horizon = cfg.forecast.horizon;
            let pops = projections(cfg, &panel, horizon)?;
            let samples = forecast_horizon::<f64>(&model_cfg, &graph, &fitted, horizon, &pops, &cfg.fit)?;
            seeds.insert("fit".into(), cfg.fit.seed);
            let summary = national_distribution(&samples, Some(&panel), cfg.national.areas.as_deref())?;
            stage.write_with("national.csv", |w| io::write_national(&summary, w))?;
            stage.write_with("diagnostics.csv", |w| io::write_diagnostics(&samples, w))?;
        }
        Command::Simulate(_) => {
            let s = &cfg.simulate;
            let graph = match &cfg.paths.adjacency {
                Some(p) => io::load_adjacency(p)?,
                None => match s.lattice.as_slice() {
                    &[r, c] => grid_graph(r, c)?,
                    _ => return Err(Error::Config("[simulate] lattice must be [rows, cols]".into())),
                },
            };
            if !(s.population > 0.0) {
                return Err(Error::Config("[simulate] population must be positive".into()));
            }
            let model = LatentModel::<f64>::from_config(&model_cfg, &graph, s.num_years)?;
            let hyper = simulation_hyper(&model, &s.hyper)?;
            let pops = uniform_populations(model.grid(), s.population);
            let intercepts = Intercepts { incidence: s.intercept_incidence, mortality: s.intercept_mortality };
            let (panel, truth) = simulate_model(&model, s.first_year, &pops, &hyper, intercepts, s.seed)?;
            seeds.insert("simulate".into(), s.seed);
            stage.write_with("panel.csv", |w| io::write_panel(&panel, w))?;
            stage.write_with("adjacency.txt", |w| graph.write_adjacency(w))?;
            stage.write_with("truth.csv", |w| io::write_truth(&truth, model.grid(), s.first_year, unit, w))?;
            stage.write_with("truth_hyper.csv", |w| io::write_truth_hyper(&truth, w))?;
            if s.projection_years > 0 {
                let future = vec![s.population; 2 * graph.num_areas() * s.projection_years];
                let ext = panel.extended(s.projection_years, &future)?;
                stage.write_with("projections.csv", |w| io::write_projections(&ext, panel.num_years(), w))?;
            }
        }
    }

    let manifest = Manifest {
        command: cmd.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        seeds,
        files: BTreeMap::new(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    stage.commit(manifest)
}

/// Parses `args` (program name first), runs the command and maps errors to
/// a nonzero exit status.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match effective_config(&cli.command).and_then(|cfg| execute(&cli.command, &cfg)) {
        Ok(m) => {
            log::info!("{} finished in {:.2}s, {} files", m.command, m.wall_time_seconds, m.files.len() + 1);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Reads a manifest written by [`execute`].
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let f = File::open(dir.join(io::MANIFEST_NAME))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
        location: dir.join(io::MANIFEST_NAME).display().to_string(),
        message: e.to_string(),
    })
}
