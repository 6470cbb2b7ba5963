//! Masking of incidence series and the rolling-origin cross-validation loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::inference::{fit_model, FitSettings};
use crate::model::{LatentModel, ModelConfig};
use crate::panel::{Disease, ObservationPanel};
use crate::scalar::Real;
use crate::scoring::{score_cell, CellKind, CellScore, ScoreReport, ScoringOptions};

/// Share of areas with incidence data in each successive band.
pub const DEFAULT_FRACTIONS: [f64; 6] = [0.70, 0.75, 0.81, 0.88, 0.93, 1.00];
pub const DEFAULT_BAND_YEARS: usize = 3;
pub const DEFAULT_MAX_FOLDS: usize = 6;
/// Preferred length of the first fold's fitted window.
pub const DEFAULT_MIN_FIT_YEARS: usize = 11;

/// Which areas lack incidence data in which years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub first_year: i32,
    pub num_years: usize,
    pub band_years: usize,
    pub fractions: Vec<f64>,
    /// Areas without incidence data in each band.
    pub masked_counts: Vec<usize>,
    /// First year with incidence data, per area.
    pub first_available: Vec<i32>,
    pub seed: u64,
}

/// `round(f · A)` with halves rounded down.
fn available_count(fraction: f64, num_areas: usize) -> usize {
    let x = fraction * num_areas as f64;
    let floor = x.floor();
    let frac = x - floor;
    if (frac - 0.5).abs() < 1e-9 || frac < 0.5 {
        floor as usize
    } else {
        floor as usize + 1
    }
}

/// Nested random masking: band `b` (years `first + b·band_years` onward)
/// has `round(fractions[b] · A)` areas with data, and an area with data stays
/// available. The last band runs to the end of the panel.
pub fn build_mask(
    num_areas: usize,
    first_year: i32,
    num_years: usize,
    fractions: &[f64],
    band_years: usize,
    seed: u64,
) -> Result<MaskSchedule> {
    if fractions.is_empty() || band_years == 0 {
        return Err(Error::InvalidArgument("mask needs at least one band of at least one year".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::InvalidArgument(format!("availability fraction {f} outside [0, 1]")));
    }
    if fractions.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument("availability fractions must be non-decreasing".into()));
    }
    if *fractions.last().expect("non-empty") != 1.0 {
        return Err(Error::InvalidArgument("the last availability fraction must be 1".into()));
    }
    let masked_counts: Vec<usize> = fractions.iter().map(|&f| num_areas - available_count(f, num_areas)).collect();

    let mut order: Vec<usize> = (0..num_areas).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut first_available = vec![first_year; num_areas];
    for (pos, &area) in order.iter().enumerate() {
        // the first `masked_counts[b]` areas of the permutation are masked in band b
        let band = masked_counts.iter().position(|&m| pos >= m).expect("last band masks nothing");
        first_available[area] = first_year + (band * band_years) as i32;
    }
    Ok(MaskSchedule {
        first_year,
        num_years,
        band_years,
        fractions: fractions.to_vec(),
        masked_counts,
        first_available,
        seed,
    })
}

impl MaskSchedule {
    pub fn num_areas(&self) -> usize {
        self.first_available.len()
    }

    /// Band of a calendar year.
    pub fn band_of(&self, year: i32) -> usize {
        let offset = (year - self.first_year).max(0) as usize / self.band_years;
        offset.min(self.fractions.len() - 1)
    }

    pub fn is_masked(&self, area: usize, year: i32) -> bool {
        year < self.first_available[area]
    }

    /// Years without incidence data; `None` for areas never masked.
    pub fn missing_years(&self, area: usize) -> Option<usize> {
        let m = (self.first_available[area] - self.first_year) as usize;
        (m > 0).then_some(m)
    }

    /// Areas with incidence data in `year`.
    pub fn available_areas(&self, year: i32) -> usize {
        (0..self.num_areas()).filter(|&i| !self.is_masked(i, year)).count()
    }

    /// Removes masked incidence counts from `panel`.
    pub fn apply(&self, panel: &ObservationPanel) -> Result<ObservationPanel> {
        if panel.num_areas() != self.num_areas() || panel.first_year() != self.first_year {
            return Err(Error::InvalidArgument("mask does not match the panel".into()));
        }
        let mut out = panel.clone();
        for i in 0..panel.num_areas() {
            for t in 0..panel.num_years() {
                if self.is_masked(i, panel.year_label(t)) {
                    out.set_missing(i, t, Disease::Incidence);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub fit_start: i32,
    pub fit_end: i32,
    pub forecast_years: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub horizon: usize,
    pub folds: Vec<Fold>,
}

/// Rolling-origin folds: the last fold ends `horizon` years before
/// `last_year`, each earlier fold one year before the next. At most
/// `max_folds` folds are made, and none whose window would be shorter than
/// `min_fit_years`, except that a single fold is always made when the span
/// allows at least two fitted years.
pub fn build_cv_plan_with(
    first_year: i32,
    last_year: i32,
    horizon: usize,
    max_folds: usize,
    min_fit_years: usize,
) -> Result<CvPlan> {
    if horizon == 0 || max_folds == 0 {
        return Err(Error::InvalidArgument("horizon and fold count must be at least 1".into()));
    }
    let span = (last_year - first_year + 1).max(0) as usize;
    if span < horizon + 2 {
        return Err(Error::InvalidArgument(format!(
            "{span} years cannot hold a two-year window plus a {horizon}-year forecast"
        )));
    }
    let last_end = last_year - horizon as i32;
    let preferred_first_end = first_year + min_fit_years.max(2) as i32 - 1;
    let first_end = preferred_first_end.min(last_end).max(last_end - max_folds as i32 + 1);
    let folds = (first_end..=last_end)
        .enumerate()
        .map(|(k, end)| Fold {
            index: k,
            fit_start: first_year,
            fit_end: end,
            forecast_years: (1..=horizon as i32).map(|h| end + h).collect(),
        })
        .collect();
    Ok(CvPlan { horizon, folds })
}

/// [`build_cv_plan_with`] with six folds and an eleven-year first window.
pub fn build_cv_plan(first_year: i32, last_year: i32, horizon: usize) -> Result<CvPlan> {
    build_cv_plan_with(first_year, last_year, horizon, DEFAULT_MAX_FOLDS, DEFAULT_MIN_FIT_YEARS)
}

/// What happened in one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub fold: Fold,
    pub seed: u64,
    /// `None` on success.
    pub error: Option<String>,
    pub likelihood_terms: usize,
    pub observed_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub folds: Vec<FoldOutcome>,
    pub scores: ScoreReport,
}

/// Panel a fold is fitted on: years up to the forecast end, masked incidence
/// and every count of the forecast years removed.
pub fn fold_panel(truth: &ObservationPanel, mask: &MaskSchedule, fold: &Fold) -> Result<ObservationPanel> {
    let end = *fold.forecast_years.last().unwrap_or(&fold.fit_end);
    let years = truth
        .year_index(end)
        .ok_or_else(|| Error::InvalidArgument(format!("panel does not cover {end}")))?
        + 1;
    if truth.first_year() != fold.fit_start {
        return Err(Error::InvalidArgument("fold does not start where the panel starts".into()));
    }
    let mut p = mask.apply(&truth.truncated(years)?)?;
    for t in 0..years {
        if p.year_label(t) > fold.fit_end {
            for i in 0..p.num_areas() {
                for d in Disease::ALL {
                    p.set_missing(i, t, d);
                }
            }
        }
    }
    Ok(p)
}

/// Runs every fold: masks incidence, fits with seed `settings.seed + k`,
/// scores masked cells inside the window and forecast cells by horizon. A
/// failed fold is recorded and the others continue.
pub fn run_validation<T: Real>(
    cfg: &ModelConfig,
    graph: &AreaGraph,
    truth: &ObservationPanel,
    mask: &MaskSchedule,
    plan: &CvPlan,
    settings: &FitSettings,
    options: &ScoringOptions,
) -> Result<ValidationReport> {
    if graph.num_areas() != truth.num_areas() {
        return Err(Error::Panel("graph and panel have different numbers of areas".into()));
    }
    if (0..truth.num_areas()).any(|i| (0..truth.num_years()).any(|t| truth.count(i, t, Disease::Mortality).is_none())) {
        return Err(Error::Panel("validation needs complete mortality data".into()));
    }
    let mut outcomes = Vec::new();
    let mut cells = Vec::new();
    for fold in &plan.folds {
        let seed = settings.seed.wrapping_add(fold.index as u64);
        let mut outcome = FoldOutcome { fold: fold.clone(), seed, error: None, likelihood_terms: 0, observed_cells: 0 };
        match run_fold::<T>(cfg, graph, truth, mask, fold, &settings.with_seed(seed), options) {
            Ok((fold_cells, terms, observed)) => {
                outcome.likelihood_terms = terms;
                outcome.observed_cells = observed;
                cells.extend(fold_cells);
            }
            Err(e) => {
                log::warn!("fold {} failed: {e}", fold.index + 1);
                outcome.error = Some(e.to_string());
            }
        }
        outcomes.push(outcome);
    }
    Ok(ValidationReport { folds: outcomes, scores: ScoreReport::build(*options, cells) })
}

fn run_fold<T: Real>(
    cfg: &ModelConfig,
    graph: &AreaGraph,
    truth: &ObservationPanel,
    mask: &MaskSchedule,
    fold: &Fold,
    settings: &FitSettings,
    options: &ScoringOptions,
) -> Result<(Vec<CellScore>, usize, usize)> {
    let panel = fold_panel(truth, mask, fold)?;
    let model = LatentModel::<T>::from_config(cfg, graph, panel.num_years())?;
    let samples = fit_model(&model, &panel, settings)?;
    let mut out = Vec::new();
    for t in 0..panel.num_years() {
        let year = panel.year_label(t);
        for i in 0..panel.num_areas() {
            let (kind, horizon) = if year > fold.fit_end {
                (CellKind::Forecast, Some((year - fold.fit_end) as usize))
            } else if mask.is_masked(i, year) {
                (CellKind::Masked, None)
            } else {
                continue;
            };
            if truth.count(i, t, Disease::Incidence).is_none() {
                continue;
            }
            let mut c = score_cell(&samples, truth, i, t, options)?;
            c.kind = kind;
            c.fold = fold.index;
            c.horizon = horizon;
            c.missing_years = mask.missing_years(i);
            if kind == CellKind::Masked {
                c.band = Some(mask.band_of(year));
            }
            out.push(c);
        }
    }
    Ok((out, samples.diagnostics.likelihood_terms, panel.num_observed()))
}
