//! National incidence distributions: per draw and year, the sum of the
//! area predictive counts.

use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::panel::{Disease, ObservationPanel};
use crate::scalar::Real;
use crate::scoring::quantile_sorted;

#[derive(Debug, Clone, PartialEq)]
pub struct NationalYear {
    pub year: i32,
    /// Registered total, when every included area has a count.
    pub observed: Option<u64>,
    pub mean: f64,
    pub q025: f64,
    pub q975: f64,
    /// `q975 − q025`.
    pub cil: f64,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NationalSummary {
    pub years: Vec<NationalYear>,
    /// National draws per year (`draws[t][s]`).
    pub draws: Vec<Vec<u64>>,
}

/// Column sums over `areas` of the incidence predictive draws, for every year
/// of the sample grid.
pub fn national_draws<T: Real>(samples: &PosteriorSamples<T>, areas: &[usize]) -> Result<Vec<Vec<u64>>> {
    let grid = samples.grid();
    if areas.is_empty() {
        return Err(Error::InvalidArgument("no areas to aggregate".into()));
    }
    if let Some(&a) = areas.iter().find(|&&a| a >= grid.num_areas) {
        return Err(Error::InvalidArgument(format!("area {a} has no draws")));
    }
    let s_total = samples.num_draws();
    let mut out = Vec::with_capacity(grid.num_years);
    for t in 0..grid.num_years {
        let mut sums = vec![0u64; s_total];
        for &i in areas {
            let d = samples.predictive_for(i, t, Disease::Incidence);
            if d.len() != s_total {
                return Err(Error::InvalidArgument(format!("area {i} lacks draws for year index {t}")));
            }
            for (acc, &c) in sums.iter_mut().zip(d) {
                *acc += c;
            }
        }
        out.push(sums);
    }
    Ok(out)
}

/// National (or `areas`-subset) incidence per year with its empirical 95%
/// interval. Observed totals come from `truth` where it covers the year.
pub fn national_distribution<T: Real>(
    samples: &PosteriorSamples<T>,
    truth: Option<&ObservationPanel>,
    areas: Option<&[usize]>,
) -> Result<NationalSummary> {
    let all: Vec<usize> = (0..samples.grid().num_areas).collect();
    let areas = areas.unwrap_or(&all);
    if let Some(p) = truth {
        if p.first_year() != samples.first_year() || p.num_areas() != samples.grid().num_areas {
            return Err(Error::InvalidArgument("truth panel does not match the samples".into()));
        }
    }
    let draws = national_draws(samples, areas)?;
    let mut years = Vec::with_capacity(draws.len());
    for (t, d) in draws.iter().enumerate() {
        let mut sorted: Vec<f64> = d.iter().map(|&c| c as f64).collect();
        sorted.sort_by(f64::total_cmp);
        let mean = d.iter().map(|&c| c as f64).sum::<f64>() / d.len() as f64;
        let q025 = quantile_sorted(&sorted, 0.025);
        let q975 = quantile_sorted(&sorted, 0.975);
        let observed = truth.filter(|p| t < p.num_years()).and_then(|p| {
            areas.iter().map(|&i| p.count(i, t, Disease::Incidence)).sum::<Option<u64>>()
        });
        years.push(NationalYear {
            year: samples.first_year() + t as i32,
            observed,
            mean,
            q025,
            q975,
            cil: q975 - q025,
            draws: d.len(),
        });
    }
    Ok(NationalSummary { years, draws })
}
