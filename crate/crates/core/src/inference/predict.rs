//! Posterior predictive counts and chain summaries.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::model::LatentModel;
use crate::scalar::Real;

use super::{Diagnostics, InferenceMode, PosteriorSamples};

/// One Poisson draw with the given mean.
pub fn draw_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean)
        .map_err(|e| Error::InvalidArgument(format!("cannot draw a Poisson count with mean {mean}: {e}")))?;
    Ok(dist.sample(rng) as u64)
}

/// Fresh predictive count draws `Poisson(n · r^s)` for the requested cells,
/// one per retained draw `s`. Draws are generated draw by draw, cell by cell.
pub fn predictive_counts<T: Real, R: Rng + ?Sized>(
    samples: &PosteriorSamples<T>,
    populations: &[f64],
    cells: &[usize],
    rng: &mut R,
) -> Result<Vec<Vec<u64>>> {
    let grid = samples.grid();
    if populations.len() != grid.num_cells() {
        return Err(Error::InvalidArgument("populations do not match the sample grid".into()));
    }
    if let Some(&c) = cells.iter().find(|&&c| c >= grid.num_cells()) {
        return Err(Error::InvalidArgument(format!("cell {c} outside the grid")));
    }
    let mut out = vec![Vec::with_capacity(samples.num_draws()); cells.len()];
    for s in 0..samples.num_draws() {
        for (k, &c) in cells.iter().enumerate() {
            let mean = populations[c] * samples.log_rate_draws(c)[s].as_f64().exp();
            out[k].push(draw_poisson(mean, rng)?);
        }
    }
    Ok(out)
}

/// Builds [`PosteriorSamples`] from draw-major latent and hyperparameter
/// draws: evaluates every cell's log rate and draws predictive counts.
pub(crate) fn finish_samples<T: Real, R: Rng + ?Sized>(
    model: &LatentModel<T>,
    first_year: i32,
    populations: &[f64],
    latent: Vec<T>,
    hyper: Vec<T>,
    mode: InferenceMode,
    diagnostics: Diagnostics,
    rng: &mut R,
) -> Result<PosteriorSamples<T>> {
    let grid = model.grid();
    let n = model.field_len();
    let h = model.hyper_specs().len();
    let cells = grid.num_cells();
    let s_total = latent.len().checked_div(n).unwrap_or_else(|| hyper.len() / h.max(1));
    let mut log_rates = vec![T::zero(); s_total * cells];
    let mut predictive = vec![0u64; s_total * cells];
    for s in 0..s_total {
        let x = &latent[s * n..(s + 1) * n];
        let theta = &hyper[s * h..(s + 1) * h];
        for c in 0..cells {
            let eta = model.cell_predictor(x, theta, c);
            log_rates[c * s_total + s] = eta;
            predictive[c * s_total + s] = draw_poisson(populations[c] * eta.as_f64().exp(), rng)?;
        }
    }
    PosteriorSamples::new(
        grid,
        first_year,
        model.hyper_labels(),
        n,
        latent,
        hyper,
        log_rates,
        predictive,
        mode,
        diagnostics,
    )
}

/// Effective sample size by Geyer's initial positive sequence estimator.
pub fn effective_sample_size(series: &[f64]) -> f64 {
    let n = series.len();
    if n < 4 {
        return n as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let acf = |lag: usize| centered[..n - lag].iter().zip(&centered[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n as f64 * var);
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    (n as f64 / tau.max(1.0 / n as f64)).min(n as f64)
}
