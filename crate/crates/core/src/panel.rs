//! Area × year × outcome observation panels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Health outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disease {
    Incidence,
    Mortality,
}

impl Disease {
    pub const ALL: [Disease; 2] = [Disease::Incidence, Disease::Mortality];

    pub fn index(self) -> usize {
        match self {
            Disease::Incidence => 0,
            Disease::Mortality => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Disease::Incidence => "incidence",
            Disease::Mortality => "mortality",
        }
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Disease {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "incidence" | "i" => Ok(Disease::Incidence),
            "mortality" | "m" => Ok(Disease::Mortality),
            other => Err(Error::Panel(format!("unknown disease `{other}`"))),
        }
    }
}

/// Dimensions of the area × year × outcome grid. Cells are numbered
/// `(d·T + t)·A + i`, so areas vary fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub num_areas: usize,
    pub num_years: usize,
}

impl Grid {
    pub fn new(num_areas: usize, num_years: usize) -> Self {
        Self { num_areas, num_years }
    }

    pub fn num_cells(&self) -> usize {
        2 * self.num_areas * self.num_years
    }

    #[inline]
    pub fn cell(&self, area: usize, year: usize, disease: Disease) -> usize {
        debug_assert!(area < self.num_areas && year < self.num_years);
        (disease.index() * self.num_years + year) * self.num_areas + area
    }

    /// Inverse of [`Grid::cell`].
    pub fn locate(&self, cell: usize) -> (usize, usize, Disease) {
        let area = cell % self.num_areas;
        let rest = cell / self.num_areas;
        let year = rest % self.num_years;
        let disease = if rest / self.num_years == 0 { Disease::Incidence } else { Disease::Mortality };
        (area, year, disease)
    }
}

/// Observed counts and populations at risk; `None` marks a missing count.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPanel {
    grid: Grid,
    first_year: i32,
    counts: Vec<Option<u64>>,
    populations: Vec<f64>,
}

impl ObservationPanel {
    /// `counts` and `populations` are indexed by [`Grid::cell`].
    pub fn new(grid: Grid, first_year: i32, counts: Vec<Option<u64>>, populations: Vec<f64>) -> Result<Self> {
        if grid.num_areas == 0 || grid.num_years == 0 {
            return Err(Error::Panel("panel needs at least one area and one year".into()));
        }
        if counts.len() != grid.num_cells() || populations.len() != grid.num_cells() {
            return Err(Error::Panel(format!(
                "expected {} cells, got {} counts and {} populations",
                grid.num_cells(),
                counts.len(),
                populations.len()
            )));
        }
        if let Some(c) = populations.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
            let (i, t, d) = grid.locate(c);
            return Err(Error::Panel(format!(
                "population must be positive (area {i}, year {}, {d})",
                first_year + t as i32
            )));
        }
        Ok(Self { grid, first_year, counts, populations })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn num_areas(&self) -> usize {
        self.grid.num_areas
    }

    pub fn num_years(&self) -> usize {
        self.grid.num_years
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.grid.num_years as i32 - 1
    }

    pub fn year_label(&self, t: usize) -> i32 {
        self.first_year + t as i32
    }

    /// Year offset of a calendar year, if inside the panel.
    pub fn year_index(&self, year: i32) -> Option<usize> {
        let t = year - self.first_year;
        (t >= 0 && (t as usize) < self.grid.num_years).then_some(t as usize)
    }

    pub fn count(&self, area: usize, year: usize, disease: Disease) -> Option<u64> {
        self.counts[self.grid.cell(area, year, disease)]
    }

    pub fn population(&self, area: usize, year: usize, disease: Disease) -> f64 {
        self.populations[self.grid.cell(area, year, disease)]
    }

    pub fn counts(&self) -> &[Option<u64>] {
        &self.counts
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn is_observed(&self, cell: usize) -> bool {
        self.counts[cell].is_some()
    }

    pub fn num_observed(&self) -> usize {
        self.counts.iter().filter(|c| c.is_some()).count()
    }

    pub fn num_observed_for(&self, disease: Disease) -> usize {
        (0..self.grid.num_years)
            .flat_map(|t| (0..self.grid.num_areas).map(move |i| (i, t)))
            .filter(|&(i, t)| self.count(i, t, disease).is_some())
            .count()
    }

    /// Sum of observed counts per outcome.
    pub fn observed_total(&self, disease: Disease) -> u64 {
        (0..self.grid.num_years)
            .flat_map(|t| (0..self.grid.num_areas).map(move |i| (i, t)))
            .filter_map(|(i, t)| self.count(i, t, disease))
            .sum()
    }

    pub fn set_missing(&mut self, area: usize, year: usize, disease: Disease) {
        let c = self.grid.cell(area, year, disease);
        self.counts[c] = None;
    }

    pub fn set_count(&mut self, area: usize, year: usize, disease: Disease, count: Option<u64>) {
        let c = self.grid.cell(area, year, disease);
        self.counts[c] = count;
    }

    /// Keeps the first `num_years` years.
    pub fn truncated(&self, num_years: usize) -> Result<Self> {
        if num_years == 0 || num_years > self.grid.num_years {
            return Err(Error::Panel(format!("cannot truncate {} years to {num_years}", self.grid.num_years)));
        }
        let grid = Grid::new(self.grid.num_areas, num_years);
        let mut counts = Vec::with_capacity(grid.num_cells());
        let mut pops = Vec::with_capacity(grid.num_cells());
        for d in Disease::ALL {
            for t in 0..num_years {
                for i in 0..grid.num_areas {
                    let c = self.grid.cell(i, t, d);
                    counts.push(self.counts[c]);
                    pops.push(self.populations[c]);
                }
            }
        }
        Self::new(grid, self.first_year, counts, pops)
    }

    /// Appends `horizon` years with every count missing. `populations` holds
    /// the new cells in grid order: outcome, then year, then area.
    pub fn extended(&self, horizon: usize, populations: &[f64]) -> Result<Self> {
        let a = self.grid.num_areas;
        if populations.len() != 2 * a * horizon {
            return Err(Error::Panel(format!(
                "projected populations: expected {} values, got {}",
                2 * a * horizon,
                populations.len()
            )));
        }
        let grid = Grid::new(a, self.grid.num_years + horizon);
        let mut counts = Vec::with_capacity(grid.num_cells());
        let mut pops = Vec::with_capacity(grid.num_cells());
        for d in Disease::ALL {
            for t in 0..grid.num_years {
                for i in 0..a {
                    if t < self.grid.num_years {
                        let c = self.grid.cell(i, t, d);
                        counts.push(self.counts[c]);
                        pops.push(self.populations[c]);
                    } else {
                        counts.push(None);
                        pops.push(populations[(d.index() * horizon + (t - self.grid.num_years)) * a + i]);
                    }
                }
            }
        }
        Self::new(grid, self.first_year, counts, pops)
    }
}
