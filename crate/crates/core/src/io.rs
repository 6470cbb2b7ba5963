//! Data files, result tables and run manifests.
//!
//! Panel files are CSV with columns `area_id, year, disease, count` and
//! optionally `population`; populations may instead come from a separate CSV
//! with columns `area_id, year, disease, population`. Area ids are 0-based
//! indices matching the adjacency file. Empty counts are missing cells.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::inference::PosteriorSamples;
use crate::national::NationalSummary;
use crate::panel::{Disease, Grid, ObservationPanel};
use crate::scalar::Real;
use crate::scoring::{mean_sd, quantile_sorted, ScoreReport};
use crate::synthetic::SimulationTruth;
use crate::validation::{MaskSchedule, ValidationReport};

fn parse_disease(s: &str, location: &str) -> Result<Disease> {
    match s.trim().to_ascii_lowercase().as_str() {
        "incidence" | "i" => Ok(Disease::Incidence),
        "mortality" | "m" => Ok(Disease::Mortality),
        other => Err(Error::Parse { location: location.into(), message: format!("unknown disease `{other}`") }),
    }
}

fn parse_err(path: &str, row: usize, message: impl Into<String>) -> Error {
    Error::Parse { location: format!("{path} row {row}"), message: message.into() }
}

#[derive(Debug, Deserialize)]
struct CountRow {
    area_id: usize,
    year: i32,
    disease: String,
    count: Option<i64>,
    #[serde(default)]
    population: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    area_id: usize,
    year: i32,
    disease: String,
    population: f64,
}

type Key = (usize, i32, Disease);

/// Rows keyed by (area, year, disease); rejects duplicates with the row
/// number (1-based, header excluded).
fn read_populations<R: Read>(reader: R, name: &str) -> Result<HashMap<Key, f64>> {
    let mut out = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (k, rec) in rdr.deserialize::<PopulationRow>().enumerate() {
        let row = k + 1;
        let r = rec.map_err(|e| parse_err(name, row, e.to_string()))?;
        let d = parse_disease(&r.disease, &format!("{name} row {row}"))?;
        if out.insert((r.area_id, r.year, d), r.population).is_some() {
            return Err(parse_err(name, row, "duplicate (area, year, disease)"));
        }
    }
    Ok(out)
}

/// Parses a panel from CSV readers. Every (area, year, disease) of the
/// implied grid must be present with a positive population.
pub fn read_panel<R: Read, P: Read>(counts: R, populations: Option<P>) -> Result<ObservationPanel> {
    let name = "counts";
    let mut rows: BTreeMap<Key, (Option<u64>, Option<f64>)> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(counts);
    for (k, rec) in rdr.deserialize::<CountRow>().enumerate() {
        let row = k + 1;
        let r = rec.map_err(|e| parse_err(name, row, e.to_string()))?;
        let d = parse_disease(&r.disease, &format!("{name} row {row}"))?;
        let count = match r.count {
            Some(c) if c < 0 => return Err(parse_err(name, row, format!("negative count {c}"))),
            c => c.map(|c| c as u64),
        };
        if rows.insert((r.area_id, r.year, d), (count, r.population)).is_some() {
            return Err(parse_err(name, row, "duplicate (area, year, disease)"));
        }
    }
    if rows.is_empty() {
        return Err(Error::Panel("counts file has no rows".into()));
    }
    let pops = populations.map(|p| read_populations(p, "populations")).transpose()?;

    let num_areas = rows.keys().map(|k| k.0).max().expect("non-empty") + 1;
    let first_year = rows.keys().map(|k| k.1).min().expect("non-empty");
    let last_year = rows.keys().map(|k| k.1).max().expect("non-empty");
    let grid = Grid::new(num_areas, (last_year - first_year + 1) as usize);
    let mut counts = vec![None; grid.num_cells()];
    let mut populations = vec![f64::NAN; grid.num_cells()];
    for (&(i, y, d), &(c, p)) in &rows {
        let cell = grid.cell(i, (y - first_year) as usize, d);
        counts[cell] = c;
        let pop = match &pops {
            Some(m) => m.get(&(i, y, d)).copied(),
            None => p,
        };
        populations[cell] = pop.ok_or_else(|| {
            Error::Panel(format!("missing population for area {i}, year {y}, {}", d.as_str()))
        })?;
    }
    if rows.len() != grid.num_cells() {
        for c in 0..grid.num_cells() {
            let (i, t, d) = grid.locate(c);
            if !rows.contains_key(&(i, first_year + t as i32, d)) {
                return Err(Error::Panel(format!(
                    "no row for area {i}, year {}, {}",
                    first_year + t as i32,
                    d.as_str()
                )));
            }
        }
    }
    ObservationPanel::new(grid, first_year, counts, populations)
}

/// Loads a panel from a counts CSV and an optional population CSV.
pub fn load_panel(counts_path: &Path, population_path: Option<&Path>) -> Result<ObservationPanel> {
    let counts = BufReader::new(File::open(counts_path)?);
    let pops = population_path.map(File::open).transpose()?.map(BufReader::new);
    read_panel(counts, pops)
}

/// Writes a panel in the counts format, populations included.
pub fn write_panel<W: Write>(panel: &ObservationPanel, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["area_id", "year", "disease", "count", "population"])?;
    for d in Disease::ALL {
        for t in 0..panel.num_years() {
            for i in 0..panel.num_areas() {
                let count = panel.count(i, t, d).map(|c| c.to_string()).unwrap_or_default();
                wtr.write_record([
                    i.to_string(),
                    panel.year_label(t).to_string(),
                    d.as_str().to_string(),
                    count,
                    panel.population(i, t, d).to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads projected populations for the `horizon` years after `panel`, in
/// the order expected by [`ObservationPanel::extended`].
pub fn load_projections(path: &Path, panel: &ObservationPanel, horizon: usize) -> Result<Vec<f64>> {
    let pops = read_populations(BufReader::new(File::open(path)?), &path.display().to_string())?;
    let mut out = Vec::with_capacity(2 * panel.num_areas() * horizon);
    for d in Disease::ALL {
        for h in 1..=horizon {
            let year = panel.last_year() + h as i32;
            for i in 0..panel.num_areas() {
                let p = pops.get(&(i, year, d)).copied().ok_or_else(|| {
                    Error::Panel(format!("no projected population for area {i}, year {year}, {}", d.as_str()))
                })?;
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Writes the populations of years `from..` of `panel` in the projections
/// format (`area_id, year, disease, population`).
pub fn write_projections<W: Write>(panel: &ObservationPanel, from: usize, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["area_id", "year", "disease", "population"])?;
    for d in Disease::ALL {
        for t in from..panel.num_years() {
            for i in 0..panel.num_areas() {
                wtr.write_record([
                    i.to_string(),
                    panel.year_label(t).to_string(),
                    d.as_str().to_string(),
                    panel.population(i, t, d).to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_adjacency(path: &Path) -> Result<AreaGraph> {
    AreaGraph::read_adjacency(BufReader::new(File::open(path)?))
}

/// Per-cell posterior rate summaries in report units.
pub fn write_fit_summary<T: Real, W: Write>(
    samples: &PosteriorSamples<T>,
    panel: &ObservationPanel,
    rate_unit: f64,
    w: W,
) -> Result<()> {
    let grid = samples.grid();
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "area_id", "year", "disease", "observed", "population", "observed_rate", "mean", "sd", "q025", "median",
        "q975",
    ])?;
    for d in Disease::ALL {
        for t in 0..grid.num_years {
            for i in 0..grid.num_areas {
                let cell = grid.cell(i, t, d);
                let mut r: Vec<f64> = samples.rate_draws(cell).iter().map(|v| v.as_f64() * rate_unit).collect();
                let (mean, sd) = mean_sd(&r);
                r.sort_by(f64::total_cmp);
                let observed = (t < panel.num_years()).then(|| panel.count(i, t, d)).flatten();
                let pop = (t < panel.num_years()).then(|| panel.population(i, t, d));
                wtr.write_record([
                    i.to_string(),
                    (samples.first_year() + t as i32).to_string(),
                    d.as_str().to_string(),
                    observed.map(|c| c.to_string()).unwrap_or_default(),
                    pop.map(|p| p.to_string()).unwrap_or_default(),
                    observed.zip(pop).map(|(c, p)| (c as f64 / p * rate_unit).to_string()).unwrap_or_default(),
                    mean.to_string(),
                    sd.to_string(),
                    quantile_sorted(&r, 0.025).to_string(),
                    quantile_sorted(&r, 0.5).to_string(),
                    quantile_sorted(&r, 0.975).to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Hyperparameter summaries and sampler diagnostics.
pub fn write_hyper_summary<T: Real, W: Write>(samples: &PosteriorSamples<T>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["parameter", "mean", "sd", "q025", "median", "q975", "acceptance", "ess"])?;
    let diag = &samples.diagnostics;
    for &label in samples.hyper_labels() {
        let mut v: Vec<f64> =
            samples.hyper_series(label).expect("label of these samples").iter().map(|x| x.as_f64()).collect();
        let (mean, sd) = mean_sd(&v);
        v.sort_by(f64::total_cmp);
        let lookup = |xs: &[(crate::model::HyperLabel, f64)]| {
            xs.iter().find(|(l, _)| *l == label).map(|(_, a)| a.to_string()).unwrap_or_default()
        };
        wtr.write_record([
            label.name(),
            mean.to_string(),
            sd.to_string(),
            quantile_sorted(&v, 0.025).to_string(),
            quantile_sorted(&v, 0.5).to_string(),
            quantile_sorted(&v, 0.975).to_string(),
            lookup(&diag.hyper_acceptance),
            lookup(&diag.hyper_ess),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_diagnostics<T: Real, W: Write>(samples: &PosteriorSamples<T>, w: W) -> Result<()> {
    let d = &samples.diagnostics;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["item", "value"])?;
    wtr.write_record(["mode", &format!("{:?}", samples.mode)])?;
    wtr.write_record(["draws", &samples.num_draws().to_string()])?;
    wtr.write_record(["field_acceptance", &d.field_acceptance.to_string()])?;
    wtr.write_record(["likelihood_terms", &d.likelihood_terms.to_string()])?;
    for w in &d.warnings {
        wtr.write_record(["warning", w])?;
    }
    wtr.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per scored cell.
pub fn write_score_cells<W: Write>(report: &ScoreReport, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "kind", "fold", "area_id", "year", "band", "missing_years", "horizon", "observed_count", "observed_rate",
        "fitted_rate", "lower", "upper", "arb", "dss", "is",
    ])?;
    for c in &report.cells {
        wtr.write_record([
            c.kind.to_string(),
            (c.fold + 1).to_string(),
            c.area.to_string(),
            c.year.to_string(),
            c.band.map(|b| (b + 1).to_string()).unwrap_or_default(),
            c.missing_years.map(|m| m.to_string()).unwrap_or_default(),
            c.horizon.map(|h| h.to_string()).unwrap_or_default(),
            c.observed_count.to_string(),
            c.observed_rate.to_string(),
            c.fitted_rate.to_string(),
            c.lower.to_string(),
            c.upper.to_string(),
            opt(c.arb),
            opt(c.dss),
            c.interval_score.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row per group aggregate. The header comment records β and the rate
/// unit of the interval score.
pub fn write_score_groups<W: Write>(report: &ScoreReport, mut w: W) -> Result<()> {
    writeln!(w, "# beta={} rate_unit={}", report.options.beta, report.options.rate_unit)?;
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["kind", "grouping", "group", "cells", "arb_cells", "marb", "dss_cells", "dss", "is"])?;
    for g in &report.groups {
        wtr.write_record([
            g.kind.to_string(),
            g.grouping.to_string(),
            g.key.clone(),
            g.cells.to_string(),
            g.arb_cells.to_string(),
            opt(g.marb),
            g.dss_cells.to_string(),
            opt(g.dss),
            g.interval_score.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_folds<W: Write>(report: &ValidationReport, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["fold", "fit_start", "fit_end", "forecast_start", "forecast_end", "seed", "status", "likelihood_terms", "observed_cells"])?;
    for f in &report.folds {
        wtr.write_record([
            (f.fold.index + 1).to_string(),
            f.fold.fit_start.to_string(),
            f.fold.fit_end.to_string(),
            f.fold.forecast_years.first().map(|y| y.to_string()).unwrap_or_default(),
            f.fold.forecast_years.last().map(|y| y.to_string()).unwrap_or_default(),
            f.seed.to_string(),
            f.error.clone().unwrap_or_else(|| "ok".into()),
            f.likelihood_terms.to_string(),
            f.observed_cells.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_mask<W: Write>(mask: &MaskSchedule, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["area_id", "first_available", "missing_years"])?;
    for (i, y) in mask.first_available.iter().enumerate() {
        wtr.write_record([i.to_string(), y.to_string(), mask.missing_years(i).unwrap_or(0).to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_national<W: Write>(summary: &NationalSummary, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["year", "observed", "mean", "q025", "q975", "cil"])?;
    for y in &summary.years {
        wtr.write_record([
            y.year.to_string(),
            y.observed.map(|c| c.to_string()).unwrap_or_default(),
            y.mean.to_string(),
            y.q025.to_string(),
            y.q975.to_string(),
            y.cil.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// True rates (report units) and log rates of a simulated panel.
pub fn write_truth<T: Real, W: Write>(truth: &SimulationTruth<T>, grid: Grid, first_year: i32, rate_unit: f64, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["area_id", "year", "disease", "rate", "log_rate", "count"])?;
    for c in 0..grid.num_cells() {
        let (i, t, d) = grid.locate(c);
        wtr.write_record([
            i.to_string(),
            (first_year + t as i32).to_string(),
            d.as_str().to_string(),
            (truth.rate(c).as_f64() * rate_unit).to_string(),
            truth.log_rates[c].as_f64().to_string(),
            truth.counts[c].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_truth_hyper<T: Real, W: Write>(truth: &SimulationTruth<T>, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["parameter", "value"])?;
    for (l, v) in truth.hyper.labels().iter().zip(truth.hyper.values()) {
        wtr.write_record([l.name(), v.as_f64().to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Record of a run: what was computed from what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the effective configuration.
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Output files with their SHA-256, relative to the output directory.
    pub files: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output files are written into a staging directory next to their final
/// place and moved there by [`OutputStage::commit`]. Dropping an uncommitted
/// stage removes everything it wrote.
#[derive(Debug)]
pub struct OutputStage {
    dir: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
    committed: bool,
    /// Whether `dir` did not exist before this stage.
    created_dir: bool,
}

impl OutputStage {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        let staging = dir.join(format!(".staging-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        Ok(Self { dir: dir.to_path_buf(), staging, files: Vec::new(), committed: false, created_dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Creates `name` in the staging directory.
    pub fn create(&mut self, name: &str) -> Result<File> {
        if self.files.iter().any(|f| f == name) {
            return Err(Error::InvalidArgument(format!("output `{name}` written twice")));
        }
        self.files.push(name.to_string());
        Ok(File::create(self.staging.join(name))?)
    }

    /// Writes `name` through `f` with a buffered writer.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut w = std::io::BufWriter::new(self.create(name)?);
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Adds the manifest (listing every staged file) and moves all files into
    /// the output directory.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<Manifest> {
        for name in &self.files {
            manifest.files.insert(name.clone(), sha256_hex(&fs::read(self.staging.join(name))?));
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::InvalidArgument(format!("cannot serialize manifest: {e}")))?;
        fs::write(self.staging.join(MANIFEST_NAME), json + "\n")?;
        for name in self.files.iter().map(String::as_str).chain([MANIFEST_NAME]) {
            fs::rename(self.staging.join(name), self.dir.join(name))?;
        }
        fs::remove_dir(&self.staging)?;
        self.committed = true;
        Ok(manifest)
    }
}

impl Drop for OutputStage {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
            if self.created_dir {
                let _ = fs::remove_dir(&self.dir);
            }
        }
    }
}
