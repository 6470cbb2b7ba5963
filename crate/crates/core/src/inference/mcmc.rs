//! Metropolis-within-Gibbs sampler.
//!
//! Each sweep updates the whole field by an independence Metropolis-Hastings
//! step whose proposal is the constrained Gaussian approximation at the
//! current hyperparameters, then every hyperparameter by a Gaussian random
//! walk on its log scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::LatentModel;
use crate::panel::ObservationPanel;
use crate::scalar::Real;

use super::gaussian::LaplaceEngine;
use super::predict::{effective_sample_size, finish_samples};
use super::{Diagnostics, FitSettings, InferenceMode, PosteriorSamples};

const ADAPT_WINDOW: usize = 50;

fn accept<R: Rng + ?Sized, T: Real>(log_ratio: T, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= T::zero() || rng.random::<f64>().ln() < log_ratio.as_f64()
}

/// Runs one chain. Reproducible for a given seed.
pub fn run_mcmc<T: Real>(
    model: &LatentModel<T>,
    panel: &ObservationPanel,
    settings: &FitSettings,
) -> Result<PosteriorSamples<T>> {
    settings.validate()?;
    let engine = LaplaceEngine::new(model, panel, settings.likelihood)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let labels = model.hyper_labels();
    let h = labels.len();
    let n = model.field_len();

    let mut theta: Vec<T> = model.default_hyper().values().to_vec();
    for (k, spec) in model.hyper_specs().iter().enumerate() {
        theta[k] = theta[k].max(spec.prior.lower_bound() * T::lit(2.0));
    }
    let mut gauss = engine.approximate(&theta, None)?;
    let mut x = gauss.mean().to_vec();
    let mut lp = engine.log_joint(&x, &theta);

    let mut steps = vec![settings.hyper_step; h];
    let mut window_acc = vec![0usize; h];
    let total = settings.burn_in + settings.n_samples * settings.thin;
    let mut field_acc_kept = 0usize;
    let mut field_acc_all = 0usize;
    let mut hyper_acc_kept = vec![0usize; h];
    let mut hyper_acc_all = vec![0usize; h];
    let mut latent = Vec::with_capacity(settings.n_samples * n);
    let mut hyper = Vec::with_capacity(settings.n_samples * h);

    for iter in 0..total {
        let kept_phase = iter >= settings.burn_in;

        // field
        if iter > 0 {
            gauss = engine.approximate(&theta, Some(gauss.mean()))?;
        }
        let prop = gauss.sample(&mut rng);
        let lp_prop = engine.log_joint(&prop, &theta);
        let log_ratio = lp_prop - lp - (gauss.log_kernel(&prop) - gauss.log_kernel(&x));
        if accept(log_ratio, &mut rng) {
            x = prop;
            lp = lp_prop;
            field_acc_all += 1;
            if kept_phase {
                field_acc_kept += 1;
            }
        }

        // hyperparameters, one at a time on the log scale
        for k in 0..h {
            let z = f64::std_normal(&mut rng);
            let old = theta[k];
            let new = (old.ln() + T::lit(steps[k] * z)).exp();
            theta[k] = new;
            let lp_new = engine.log_joint(&x, &theta);
            if lp_new.is_finite() && accept(lp_new - lp + new.ln() - old.ln(), &mut rng) {
                lp = lp_new;
                hyper_acc_all[k] += 1;
                window_acc[k] += 1;
                if kept_phase {
                    hyper_acc_kept[k] += 1;
                }
            } else {
                theta[k] = old;
            }
        }

        if settings.adapt && !kept_phase && (iter + 1) % ADAPT_WINDOW == 0 {
            for k in 0..h {
                let rate = window_acc[k] as f64 / ADAPT_WINDOW as f64;
                if rate < 0.2 {
                    steps[k] *= 0.7;
                } else if rate > 0.5 {
                    steps[k] *= 1.4;
                }
                window_acc[k] = 0;
            }
        }

        if kept_phase && (iter - settings.burn_in + 1).is_multiple_of(settings.thin) {
            latent.extend_from_slice(&x);
            hyper.extend_from_slice(&theta);
        }
    }

    let kept_iters = (total - settings.burn_in).max(1) as f64;
    let mut diagnostics = Diagnostics {
        field_acceptance: field_acc_kept as f64 / kept_iters,
        hyper_acceptance: labels.iter().zip(&hyper_acc_kept).map(|(&l, &a)| (l, a as f64 / kept_iters)).collect(),
        hyper_ess: Vec::new(),
        hyper_steps: labels.iter().zip(&steps).map(|(&l, &s)| (l, s)).collect(),
        likelihood_terms: engine.num_likelihood_terms(),
        warnings: Vec::new(),
    };
    let s_total = settings.n_samples;
    for (k, &label) in labels.iter().enumerate() {
        let series: Vec<f64> = (0..s_total).map(|s| hyper[s * h + k].as_f64().ln()).collect();
        diagnostics.hyper_ess.push((label, effective_sample_size(&series)));
        if hyper_acc_all[k] == 0 {
            diagnostics.warnings.push(format!("no proposal for {label} was accepted during the run"));
        }
    }
    if field_acc_all == 0 {
        diagnostics.warnings.push("no field proposal was accepted during the run".into());
    }
    for w in &diagnostics.warnings {
        log::warn!("{w}");
    }

    finish_samples(
        model,
        panel.first_year(),
        panel.populations(),
        latent,
        hyper,
        InferenceMode::Mcmc,
        diagnostics,
        &mut rng,
    )
}
