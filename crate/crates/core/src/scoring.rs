//! Absolute relative bias, Dawid-Sebastiani and interval scores, per cell and
//! averaged over groups of cells.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::panel::{Disease, ObservationPanel};
use crate::scalar::Real;

pub const DEFAULT_BETA: f64 = 0.05;
/// Rates in reports are per this many person-years.
pub const PER_100K: f64 = 1e5;

/// Empirical quantile of ascending `sorted` draws, interpolating linearly
/// between order statistics: position `p (S − 1)` (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Type-7 quantile of unsorted draws.
pub fn quantile(draws: &[f64], p: f64) -> f64 {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Mean and standard deviation of the empirical distribution of `draws`
/// (divisor `S`).
pub fn mean_sd(draws: &[f64]) -> (f64, f64) {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `|r̂ − r| / r`.
pub fn arb(observed_rate: f64, fitted_rate_mean: f64) -> Result<f64> {
    if !(observed_rate > 0.0) {
        return Err(Error::Scoring(format!("relative bias is undefined for observed rate {observed_rate}")));
    }
    Ok((fitted_rate_mean - observed_rate).abs() / observed_rate)
}

/// Dawid-Sebastiani score from predictive moments.
pub fn dss_from_moments(observed_count: f64, mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::Scoring("Dawid-Sebastiani score needs a positive predictive spread".into()));
    }
    let z = (observed_count - mean) / sd;
    Ok(z * z + 2.0 * sd.ln())
}

/// Dawid-Sebastiani score with mean and spread taken from predictive count
/// draws.
pub fn dss(observed_count: u64, draws: &[u64]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(Error::Scoring("Dawid-Sebastiani score needs at least two draws".into()));
    }
    let v: Vec<f64> = draws.iter().map(|&c| c as f64).collect();
    let (mean, sd) = mean_sd(&v);
    dss_from_moments(observed_count as f64, mean, sd)
}

/// Interval score of the central `(1 − β)` interval `[lower, upper]`.
pub fn interval_score(lower: f64, upper: f64, observed: f64, beta: f64) -> Result<f64> {
    if !(lower <= upper) {
        return Err(Error::Scoring(format!("interval [{lower}, {upper}] is reversed")));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Scoring(format!("beta must lie in (0, 1), got {beta}")));
    }
    let mut s = upper - lower;
    if observed < lower {
        s += 2.0 / beta * (lower - observed);
    }
    if observed > upper {
        s += 2.0 / beta * (observed - upper);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringOptions {
    pub beta: f64,
    /// Person-years per reported rate unit.
    pub rate_unit: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, rate_unit: PER_100K }
    }
}

/// Why a cell is being scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// A masked cell inside the fitted window.
    Masked,
    /// A cell `h` years after the fitted window.
    Forecast,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Masked => "masked",
            CellKind::Forecast => "forecast",
        })
    }
}

/// Scores of one incidence cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellScore {
    pub kind: CellKind,
    pub fold: usize,
    pub area: usize,
    pub year: i32,
    pub observed_count: u64,
    /// Observed and fitted rates in report units.
    pub observed_rate: f64,
    pub fitted_rate: f64,
    pub lower: f64,
    pub upper: f64,
    /// `None` when the observed rate is zero.
    pub arb: Option<f64>,
    /// `None` when the predictive draws do not vary.
    pub dss: Option<f64>,
    pub interval_score: f64,
    /// Availability band of the year (masked cells).
    pub band: Option<usize>,
    /// Years of missing incidence of the area, if it was masked.
    pub missing_years: Option<usize>,
    /// Years after the end of the fitted window (forecast cells).
    pub horizon: Option<usize>,
}

/// Scores incidence cell `(area, t)` of `samples` against `truth`.
/// `t` indexes years of the sample grid, which starts where `truth` starts.
pub fn score_cell<T: Real>(
    samples: &PosteriorSamples<T>,
    truth: &ObservationPanel,
    area: usize,
    t: usize,
    options: &ScoringOptions,
) -> Result<CellScore> {
    let grid = samples.grid();
    if area >= grid.num_areas || t >= grid.num_years || t >= truth.num_years() || area >= truth.num_areas() {
        return Err(Error::InvalidArgument(format!("cell ({area}, {t}) outside the samples or the truth panel")));
    }
    if samples.first_year() != truth.first_year() {
        return Err(Error::InvalidArgument("samples and truth start in different years".into()));
    }
    let observed_count = truth
        .count(area, t, Disease::Incidence)
        .ok_or_else(|| Error::Scoring(format!("no observed count for area {area}, year {}", truth.year_label(t))))?;
    let cell = grid.cell(area, t, Disease::Incidence);
    let unit = options.rate_unit;
    let observed_rate = observed_count as f64 / truth.population(area, t, Disease::Incidence) * unit;
    let mut rates: Vec<f64> = samples.rate_draws(cell).iter().map(|r| r.as_f64() * unit).collect();
    rates.sort_by(f64::total_cmp);
    let fitted_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    let lower = quantile_sorted(&rates, options.beta / 2.0);
    let upper = quantile_sorted(&rates, 1.0 - options.beta / 2.0);
    Ok(CellScore {
        kind: CellKind::Masked,
        fold: 0,
        area,
        year: truth.year_label(t),
        observed_count,
        observed_rate,
        fitted_rate,
        lower,
        upper,
        arb: arb(observed_rate, fitted_rate).ok(),
        dss: dss(observed_count, samples.predictive_draws(cell)).ok(),
        interval_score: interval_score(lower, upper, observed_rate, options.beta)?,
        band: None,
        missing_years: None,
        horizon: None,
    })
}

/// How cells are grouped before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Grouping {
    All,
    Band,
    MissingDuration,
    /// Exactly `h` years ahead.
    Horizon,
    /// Up to `h` years ahead.
    CumulativeHorizon,
    /// Missing duration and year (figure series).
    MissingDurationYear,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::All => "all",
            Grouping::Band => "band",
            Grouping::MissingDuration => "missing_duration",
            Grouping::Horizon => "horizon",
            Grouping::CumulativeHorizon => "cumulative_horizon",
            Grouping::MissingDurationYear => "missing_duration_year",
        })
    }
}

/// Means of the scores of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    pub kind: CellKind,
    pub grouping: Grouping,
    pub key: String,
    pub cells: usize,
    /// Cells entering the MARB (observed rate positive).
    pub arb_cells: usize,
    pub marb: Option<f64>,
    pub dss_cells: usize,
    pub dss: Option<f64>,
    pub interval_score: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> (usize, Option<f64>) {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n, (n > 0).then(|| s / n as f64))
}

fn group_keys(c: &CellScore, grouping: Grouping, max_horizon: usize) -> Vec<String> {
    match grouping {
        Grouping::All => vec!["all".into()],
        Grouping::Band => c.band.map(|b| format!("band{}", b + 1)).into_iter().collect(),
        Grouping::MissingDuration => c.missing_years.map(|m| format!("{m}y")).into_iter().collect(),
        Grouping::Horizon => c.horizon.map(|h| format!("h{h}")).into_iter().collect(),
        Grouping::CumulativeHorizon => {
            c.horizon.map(|h| (h..=max_horizon).map(|k| format!("h1-{k}")).collect()).unwrap_or_default()
        }
        Grouping::MissingDurationYear => {
            c.missing_years.map(|m| format!("{m}y:{}", c.year)).into_iter().collect()
        }
    }
}

/// Averages the cells of `kind` within each group. Groups appear in the
/// order of their first cell; a group without any usable cell is omitted
/// with a warning.
/// Numbers embedded in a group key, so "6y" sorts before "15y".
fn natural_key(key: &str) -> Vec<u64> {
    key.split(|c: char| !c.is_ascii_digit()).filter(|s| !s.is_empty()).map(|s| s.parse().unwrap_or(u64::MAX)).collect()
}

pub fn aggregate(cells: &[CellScore], kind: CellKind, grouping: Grouping, warnings: &mut Vec<String>) -> Vec<GroupScore> {
    let selected: Vec<&CellScore> = cells.iter().filter(|c| c.kind == kind).collect();
    let max_horizon = selected.iter().filter_map(|c| c.horizon).max().unwrap_or(0);
    let mut order: Vec<String> = Vec::new();
    let mut members: BTreeMap<String, Vec<&CellScore>> = BTreeMap::new();
    for c in &selected {
        for k in group_keys(c, grouping, max_horizon) {
            let entry = members.entry(k.clone()).or_default();
            if entry.is_empty() {
                order.push(k);
            }
            entry.push(c);
        }
    }
    order.sort_by_cached_key(|k| natural_key(k));
    let mut out = Vec::new();
    for key in order {
        let group = &members[&key];
        let (arb_cells, marb) = mean_of(group.iter().filter_map(|c| c.arb));
        let (dss_cells, dss) = mean_of(group.iter().filter_map(|c| c.dss));
        let (_, is) = mean_of(group.iter().map(|c| c.interval_score));
        if arb_cells == 0 {
            warnings.push(format!("{kind} group {grouping}={key} has no cell with a positive observed rate"));
        }
        if arb_cells < group.len() {
            warnings.push(format!(
                "{kind} group {grouping}={key}: {} cells with zero observed rate left out of the MARB",
                group.len() - arb_cells
            ));
        }
        out.push(GroupScore {
            kind,
            grouping,
            key,
            cells: group.len(),
            arb_cells,
            marb,
            dss_cells,
            dss,
            interval_score: is.expect("groups are non-empty"),
        });
    }
    out
}

/// Per-cell scores with their group means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreReport {
    pub options: ScoringOptions,
    pub cells: Vec<CellScore>,
    pub groups: Vec<GroupScore>,
    pub warnings: Vec<String>,
}

impl ScoreReport {
    /// Scores for `cells` grouped every way that applies.
    pub fn build(options: ScoringOptions, cells: Vec<CellScore>) -> Self {
        let mut warnings = Vec::new();
        let mut groups = Vec::new();
        for g in [Grouping::All, Grouping::Band, Grouping::MissingDuration, Grouping::MissingDurationYear] {
            groups.extend(aggregate(&cells, CellKind::Masked, g, &mut warnings));
        }
        for g in [Grouping::All, Grouping::Horizon, Grouping::CumulativeHorizon] {
            groups.extend(aggregate(&cells, CellKind::Forecast, g, &mut warnings));
        }
        let unscored_dss = cells.iter().filter(|c| c.dss.is_none()).count();
        if unscored_dss > 0 {
            warnings.push(format!("{unscored_dss} cells have constant predictive draws and no DSS"));
        }
        Self { options, cells, groups, warnings }
    }

    pub fn groups_of(&self, kind: CellKind, grouping: Grouping) -> impl Iterator<Item = &GroupScore> {
        self.groups.iter().filter(move |g| g.kind == kind && g.grouping == grouping)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(arb: Option<f64>, band: usize) -> CellScore {
        CellScore {
            kind: CellKind::Masked,
            fold: 0,
            area: 0,
            year: 2001,
            observed_count: 10,
            observed_rate: 100.0,
            fitted_rate: 100.0,
            lower: 90.0,
            upper: 110.0,
            arb,
            dss: Some(1.0),
            interval_score: 20.0,
            band: Some(band),
            missing_years: Some(3),
            horizon: None,
        }
    }

    #[test]
    fn golden_values() {
        assert_eq!(arb(100.0, 110.0).unwrap(), 0.1);
        assert!((arb(100.0, 88.0).unwrap() - 0.12).abs() < 1e-15);
        assert_eq!(arb(100.0, 100.0).unwrap(), 0.0);
        assert!(arb(0.0, 1.0).is_err());
        assert!((dss_from_moments(10.0, 10.0, 2.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((dss_from_moments(14.0, 10.0, 2.0).unwrap() - (4.0 + 2.0 * 2f64.ln())).abs() < 1e-12);
        assert_eq!(dss_from_moments(5.0, 5.0, 1.0).unwrap(), 0.0);
        assert_eq!(interval_score(1.0, 3.0, 2.0, 0.05).unwrap(), 2.0);
        assert_eq!(interval_score(1.0, 3.0, 4.0, 0.05).unwrap(), 42.0);
        assert_eq!(interval_score(2.0, 2.0, 2.0, 0.05).unwrap(), 0.0);
        assert!(interval_score(3.0, 1.0, 2.0, 0.05).is_err());
    }

    #[test]
    fn dss_needs_spread() {
        assert!(dss(3, &[4, 4, 4]).is_err());
        assert!(dss(3, &[4]).is_err());
        // draws 8, 12: mean 10, sd 2
        assert!((dss(10, &[8, 12]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn quantile_convention() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert!((quantile(&[4.0, 1.0, 3.0, 2.0], 0.25) - 1.75).abs() < 1e-15);
        assert_eq!(quantile(&[7.0; 5], 0.025), 7.0);
    }

    #[test]
    fn group_means() {
        let cells = vec![cell(Some(0.1), 0), cell(Some(0.2), 0), cell(None, 1), cell(Some(0.4), 1)];
        let mut w = Vec::new();
        let g = aggregate(&cells, CellKind::Masked, Grouping::Band, &mut w);
        assert_eq!(g.len(), 2);
        assert!((g[0].marb.unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(g[1].arb_cells, 1);
        assert_eq!(g[1].marb, Some(0.4));
        assert_eq!(w.len(), 1);
        let single = aggregate(&cells[..1], CellKind::Masked, Grouping::All, &mut w);
        assert_eq!(single[0].marb, Some(0.1));
        assert_eq!(single[0].interval_score, 20.0);
    }

    #[test]
    fn cumulative_horizons_nest() {
        let mut cells = Vec::new();
        for h in 1..=3 {
            let mut c = cell(Some(h as f64 / 10.0), 0);
            c.kind = CellKind::Forecast;
            c.horizon = Some(h);
            cells.push(c);
        }
        let mut w = Vec::new();
        let g = aggregate(&cells, CellKind::Forecast, Grouping::CumulativeHorizon, &mut w);
        let keys: Vec<_> = g.iter().map(|g| (g.key.as_str(), g.cells)).collect();
        assert_eq!(keys, [("h1-1", 1), ("h1-2", 2), ("h1-3", 3)]);
        assert!((g[2].marb.unwrap() - 0.2).abs() < 1e-15);
    }
}
