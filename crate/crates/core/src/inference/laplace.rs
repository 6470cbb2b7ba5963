//! Empirical-Bayes Laplace fits: hyperparameters at the mode of the
//! Laplace-approximate marginal posterior, field from its Gaussian
//! approximation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{HyperParams, LatentModel};
use crate::panel::ObservationPanel;
use crate::scalar::Real;

use super::gaussian::{ConstrainedGaussian, LaplaceEngine};
use super::predict::finish_samples;
use super::{Diagnostics, FitSettings, InferenceMode, PosteriorSamples};

const MAX_ROUNDS: usize = 40;
const MAX_LOG_PRECISION: f64 = 13.815510557964274; // ln 1e6
const MIN_LOG_UNBOUNDED: f64 = -13.815510557964274;
const LOG_SCALING_RANGE: f64 = 4.605170185988092; // ln 100
const INV_GOLDEN: f64 = 0.6180339887498949;

/// Result of an empirical-Bayes fit.
#[derive(Debug, Clone)]
pub struct EbFit<T> {
    pub hyper: HyperParams<T>,
    pub gaussian: ConstrainedGaussian<T>,
    /// Laplace log marginal posterior of the log hyperparameters at the optimum.
    pub log_marginal: T,
    pub evaluations: usize,
    pub likelihood_terms: usize,
}

struct Search<'e, 'm, T> {
    engine: &'e LaplaceEngine<'m, T>,
    warm: Vec<T>,
    evaluations: usize,
    best: Option<(f64, Vec<f64>, ConstrainedGaussian<T>)>,
}

impl<T: Real> Search<'_, '_, T> {
    /// Laplace log marginal of `u = ln θ`, including the log Jacobian.
    /// Points where the mode cannot be found count as −∞.
    fn eval(&mut self, u: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let theta: Vec<T> = u.iter().map(|&v| T::lit(v.exp())).collect();
        let g = match self.engine.approximate(&theta, Some(&self.warm)) {
            Ok(g) => g,
            Err(Error::NewtonDivergence { .. }) | Err(Error::NotPositiveDefinite { .. }) => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        };
        let value = self.engine.log_joint(g.mean(), &theta).as_f64() + u.iter().sum::<f64>()
            - 0.5 * g.constrained_log_det().as_f64();
        let value = if value.is_nan() { f64::NEG_INFINITY } else { value };
        if self.best.as_ref().is_none_or(|b| value > b.0) {
            self.best = Some((value, u.to_vec(), g));
        }
        Ok(value)
    }
}

/// Maximizes `f` on `[lo, hi]` starting from `x0` (where `f = f0`): doubling
/// steps bracket a maximum, golden sections shrink the bracket below `tol`.
fn maximize_1d(
    mut f: impl FnMut(f64) -> Result<f64>,
    x0: f64,
    f0: f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<()> {
    let mut step = 0.5;
    let right = (x0 + step).min(hi);
    let f_right = if right > x0 { f(right)? } else { f64::NEG_INFINITY };
    let (a, c) = if f_right > f0 {
        let (mut prev, mut b, mut fb) = (x0, right, f_right);
        loop {
            step *= 2.0;
            let next = (b + step).min(hi);
            if next == b {
                break (prev, b);
            }
            let fnext = f(next)?;
            if fnext > fb {
                prev = b;
                b = next;
                fb = fnext;
            } else {
                break (prev, next);
            }
        }
    } else {
        let left = (x0 - step).max(lo);
        let f_left = if left < x0 { f(left)? } else { f64::NEG_INFINITY };
        if f_left > f0 {
            let (mut prev, mut b, mut fb) = (x0, left, f_left);
            loop {
                step *= 2.0;
                let next = (b - step).max(lo);
                if next == b {
                    break (b, prev);
                }
                let fnext = f(next)?;
                if fnext > fb {
                    prev = b;
                    b = next;
                    fb = fnext;
                } else {
                    break (next, prev);
                }
            }
        } else {
            (left, right)
        }
    };

    let (mut a, mut c) = (a.min(c), a.max(c));
    let mut x1 = c - INV_GOLDEN * (c - a);
    let mut x2 = a + INV_GOLDEN * (c - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while c - a > tol {
        if f1 >= f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - INV_GOLDEN * (c - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_GOLDEN * (c - a);
            f2 = f(x2)?;
        }
    }
    Ok(())
}

fn bounds<T: Real>(model: &LatentModel<T>) -> Vec<(f64, f64)> {
    model
        .hyper_specs()
        .iter()
        .map(|spec| {
            let lb = spec.prior.lower_bound().as_f64();
            let lo = if lb > 0.0 { lb.ln() + 1e-9 } else { MIN_LOG_UNBOUNDED };
            if spec.label.is_precision() {
                (lo, MAX_LOG_PRECISION)
            } else {
                (lo.max(-LOG_SCALING_RANGE), LOG_SCALING_RANGE)
            }
        })
        .collect()
}

/// Maximizes the Laplace approximation of `p(log θ | y)` by cyclic coordinate
/// search (bracketing, then golden-section refinement). Deterministic.
pub fn fit_empirical_bayes<T: Real>(
    model: &LatentModel<T>,
    panel: &ObservationPanel,
    settings: &FitSettings,
) -> Result<EbFit<T>> {
    settings.validate()?;
    let engine = LaplaceEngine::new(model, panel, settings.likelihood)?;
    let bounds = bounds(model);
    let start: Vec<f64> = bounds.iter().map(|&(lo, hi)| 0.0f64.clamp(lo, hi)).collect();
    let theta0: Vec<T> = start.iter().map(|&v| T::lit(v.exp())).collect();
    let warm = engine.approximate(&theta0, None)?.mean().to_vec();
    let mut search = Search { engine: &engine, warm, evaluations: 0, best: None };
    if !search.eval(&start)?.is_finite() {
        return Err(Error::InvalidArgument("Laplace marginal is not finite at the starting point".into()));
    }
    let tol = settings.eb_tolerance;

    for _round in 0..MAX_ROUNDS {
        let mut max_move: f64 = 0.0;
        for (k, &(lo, hi)) in bounds.iter().enumerate() {
            let (f0, u0) = {
                let b = search.best.as_ref().expect("evaluated");
                (b.0, b.1.clone())
            };
            search.warm = search.best.as_ref().expect("evaluated").2.mean().to_vec();
            let mut u = u0.clone();
            maximize_1d(
                |v| {
                    u[k] = v;
                    search.eval(&u)
                },
                u0[k],
                f0,
                lo,
                hi,
                tol,
            )?;
            let moved = (search.best.as_ref().expect("evaluated").1[k] - u0[k]).abs();
            max_move = max_move.max(moved);
        }
        if max_move < tol {
            break;
        }
    }

    let (best, u, gaussian) = search.best.take().expect("evaluated");
    let theta: Vec<T> = u.iter().map(|&v| T::lit(v.exp())).collect();
    Ok(EbFit {
        hyper: model.hyper_from_values(theta)?,
        gaussian,
        log_marginal: T::lit(best),
        evaluations: search.evaluations,
        likelihood_terms: engine.num_likelihood_terms(),
    })
}

/// Pushes `eb_draws` field draws from the Gaussian approximation through the
/// rates and a Poisson step, with the hyperparameters fixed at the estimate.
pub fn eb_samples<T: Real>(
    model: &LatentModel<T>,
    panel: &ObservationPanel,
    fit: &EbFit<T>,
    settings: &FitSettings,
) -> Result<PosteriorSamples<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let s = settings.eb_draws;
    let n = model.field_len();
    let mut latent = Vec::with_capacity(s * n);
    let mut hyper = Vec::with_capacity(s * fit.hyper.len());
    for _ in 0..s {
        latent.extend(fit.gaussian.sample(&mut rng));
        hyper.extend_from_slice(fit.hyper.values());
    }
    let diagnostics = Diagnostics {
        field_acceptance: 1.0,
        likelihood_terms: fit.likelihood_terms,
        ..Diagnostics::default()
    };
    finish_samples(
        model,
        panel.first_year(),
        panel.populations(),
        latent,
        hyper,
        InferenceMode::EmpiricalBayesLaplace,
        diagnostics,
        &mut rng,
    )
}
