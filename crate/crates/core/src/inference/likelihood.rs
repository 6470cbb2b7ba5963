//! Observation likelihoods on the log-rate scale.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Likelihood of one observed count given its log rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    /// `O ~ Poisson(n·exp(η))`.
    #[default]
    Poisson,
    /// Gaussian pseudo-likelihood `−w/2·(η − z)²` with `z = ln((O + ½)/n)`
    /// and `w = O + ½`. Makes the field conditional exactly Gaussian; used to
    /// check the sampler in the Gaussian limit.
    QuadraticSurrogate,
}

/// An observed cell as seen by the likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservedCell<T> {
    pub cell: usize,
    pub count: T,
    pub population: T,
    ln_population: T,
    ln_count_factorial: T,
}

impl<T: Real> ObservedCell<T> {
    pub fn new(cell: usize, count: u64, population: f64) -> Self {
        let y = count as f64;
        Self {
            cell,
            count: T::lit(y),
            population: T::lit(population),
            ln_population: T::lit(population.ln()),
            ln_count_factorial: T::lit(statrs::function::gamma::ln_gamma(y + 1.0)),
        }
    }
}

/// Log-likelihood value, gradient and negative curvature at `eta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikTerms<T> {
    pub value: T,
    pub grad: T,
    pub weight: T,
    /// Sum of the absolute summands of `value`, which bounds its rounding error.
    pub magnitude: T,
}

impl LikelihoodKind {
    #[inline]
    pub fn eval<T: Real>(self, obs: &ObservedCell<T>, eta: T) -> LikTerms<T> {
        match self {
            LikelihoodKind::Poisson => {
                let mu = obs.population * eta.exp();
                let linear = obs.count * (obs.ln_population + eta);
                LikTerms {
                    value: linear - mu - obs.ln_count_factorial,
                    grad: obs.count - mu,
                    weight: mu,
                    magnitude: linear.abs() + mu + obs.ln_count_factorial,
                }
            }
            LikelihoodKind::QuadraticSurrogate => {
                let w = obs.count + T::lit(0.5);
                let z = w.ln() - obs.ln_population;
                let r = eta - z;
                let value = -T::lit(0.5) * w * r * r;
                LikTerms { value, grad: -w * r, weight: w, magnitude: value.abs() }
            }
        }
    }

    #[inline]
    pub fn value<T: Real>(self, obs: &ObservedCell<T>, eta: T) -> T {
        match self {
            LikelihoodKind::Poisson => {
                obs.count * (obs.ln_population + eta) - obs.population * eta.exp() - obs.ln_count_factorial
            }
            LikelihoodKind::QuadraticSurrogate => self.eval(obs, eta).value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_matches_pmf() {
        let obs = ObservedCell::<f64>::new(0, 7, 1000.0);
        let eta = (5.0f64 / 1000.0).ln();
        let mu: f64 = 5.0;
        let pmf = mu.powi(7) * (-mu).exp() / 5040.0;
        assert!((LikelihoodKind::Poisson.value(&obs, eta) - pmf.ln()).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for kind in [LikelihoodKind::Poisson, LikelihoodKind::QuadraticSurrogate] {
            let obs = ObservedCell::<f64>::new(0, 12, 5000.0);
            let eta = -6.0;
            let h = 1e-5;
            let t = kind.eval(&obs, eta);
            let fd = (kind.value(&obs, eta + h) - kind.value(&obs, eta - h)) / (2.0 * h);
            assert!((t.grad - fd).abs() < 1e-6, "{kind:?}");
            let fd2 = (kind.eval(&obs, eta + h).grad - kind.eval(&obs, eta - h).grad) / (2.0 * h);
            assert!((t.weight + fd2).abs() < 1e-5, "{kind:?}");
        }
    }
}
