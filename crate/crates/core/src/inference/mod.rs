//! Posterior inference for the latent models: Gaussian approximations,
//! a Metropolis-within-Gibbs sampler and an empirical-Bayes Laplace mode.

mod gaussian;
mod laplace;
mod likelihood;
mod mcmc;
mod predict;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::model::{HyperLabel, LatentModel, ModelConfig};
use crate::panel::{Disease, Grid, ObservationPanel};
use crate::scalar::Real;

pub use gaussian::{
    gaussian_approximation, sample_constrained_gaussian, ConstrainedGaussian, FieldConstraints, LaplaceEngine,
    NULL_SPACE_RIDGE,
};
pub use laplace::{eb_samples, fit_empirical_bayes, EbFit};
pub use likelihood::{LikTerms, LikelihoodKind, ObservedCell};
pub use mcmc::run_mcmc;
pub use predict::{draw_poisson, effective_sample_size, predictive_counts};

/// How a model is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    Mcmc,
    EmpiricalBayesLaplace,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "mcmc" => Ok(InferenceMode::Mcmc),
            "eb" | "laplace" | "empirical_bayes" | "empirical_bayes_laplace" => Ok(InferenceMode::EmpiricalBayesLaplace),
            other => Err(Error::Config(format!("unknown inference mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub burn_in: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub seed: u64,
    /// Initial random-walk step on the log scale of every hyperparameter.
    pub hyper_step: f64,
    /// Tune the steps during burn-in towards 20–50% acceptance.
    pub adapt: bool,
    pub mode: InferenceMode,
    /// Draws generated from the Gaussian approximation in Laplace mode.
    pub eb_draws: usize,
    /// Coordinate-search tolerance on the log scale (Laplace mode).
    pub eb_tolerance: f64,
    pub likelihood: LikelihoodKind,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            burn_in: 5000,
            n_samples: 2000,
            thin: 5,
            seed: 1,
            hyper_step: 0.3,
            adapt: true,
            mode: InferenceMode::Mcmc,
            eb_draws: 1000,
            eb_tolerance: 1e-3,
            likelihood: LikelihoodKind::Poisson,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.thin == 0 {
            return Err(Error::Config("n_samples and thin must be at least 1".into()));
        }
        if !(self.hyper_step > 0.0) {
            return Err(Error::Config("hyper_step must be positive".into()));
        }
        if self.mode == InferenceMode::EmpiricalBayesLaplace && self.eb_draws == 0 {
            return Err(Error::Config("eb_draws must be at least 1".into()));
        }
        if !(self.eb_tolerance > 0.0) {
            return Err(Error::Config("eb_tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Same settings with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Sampler health indicators.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Acceptance rate of the field update after burn-in.
    pub field_acceptance: f64,
    /// Acceptance rate of each hyperparameter update after burn-in.
    pub hyper_acceptance: Vec<(HyperLabel, f64)>,
    /// Effective sample size of each log hyperparameter.
    pub hyper_ess: Vec<(HyperLabel, f64)>,
    /// Final random-walk steps.
    pub hyper_steps: Vec<(HyperLabel, f64)>,
    /// Number of cells entering the likelihood.
    pub likelihood_terms: usize,
    pub warnings: Vec<String>,
}

/// Retained posterior draws.
///
/// Latent and hyperparameter draws are stored draw by draw; log rates and
/// predictive counts cell by cell so that per-cell summaries are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples<T> {
    grid: Grid,
    first_year: i32,
    hyper_labels: Vec<HyperLabel>,
    field_len: usize,
    num_draws: usize,
    latent: Vec<T>,
    hyper: Vec<T>,
    log_rates: Vec<T>,
    predictive: Vec<u64>,
    pub mode: InferenceMode,
    pub diagnostics: Diagnostics,
}

impl<T: Real> PosteriorSamples<T> {
    /// Assembles samples from draw-major latent/hyper draws and cell-major
    /// log rates and predictive counts.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: Grid,
        first_year: i32,
        hyper_labels: Vec<HyperLabel>,
        field_len: usize,
        latent: Vec<T>,
        hyper: Vec<T>,
        log_rates: Vec<T>,
        predictive: Vec<u64>,
        mode: InferenceMode,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let cells = grid.num_cells();
        let s = log_rates.len() / cells.max(1);
        if s == 0
            || latent.len() != s * field_len
            || hyper.len() != s * hyper_labels.len()
            || log_rates.len() != s * cells
            || predictive.len() != s * cells
        {
            return Err(Error::InvalidArgument("posterior sample arrays have inconsistent sizes".into()));
        }
        Ok(Self {
            grid,
            first_year,
            hyper_labels,
            field_len,
            num_draws: s,
            latent,
            hyper,
            log_rates,
            predictive,
            mode,
            diagnostics,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn num_draws(&self) -> usize {
        self.num_draws
    }

    pub fn hyper_labels(&self) -> &[HyperLabel] {
        &self.hyper_labels
    }

    pub fn latent_draw(&self, s: usize) -> &[T] {
        &self.latent[s * self.field_len..(s + 1) * self.field_len]
    }

    pub fn hyper_draw(&self, s: usize) -> &[T] {
        let h = self.hyper_labels.len();
        &self.hyper[s * h..(s + 1) * h]
    }

    /// All draws of one hyperparameter.
    pub fn hyper_series(&self, label: HyperLabel) -> Option<Vec<T>> {
        let k = self.hyper_labels.iter().position(|&l| l == label)?;
        Some((0..self.num_draws).map(|s| self.hyper_draw(s)[k]).collect())
    }

    pub fn log_rate_draws(&self, cell: usize) -> &[T] {
        &self.log_rates[cell * self.num_draws..(cell + 1) * self.num_draws]
    }

    /// Rate draws (per person-year) of a cell.
    pub fn rate_draws(&self, cell: usize) -> Vec<T> {
        self.log_rate_draws(cell).iter().map(|v| v.exp()).collect()
    }

    pub fn predictive_draws(&self, cell: usize) -> &[u64] {
        &self.predictive[cell * self.num_draws..(cell + 1) * self.num_draws]
    }

    pub fn predictive_for(&self, area: usize, year: usize, disease: Disease) -> &[u64] {
        self.predictive_draws(self.grid.cell(area, year, disease))
    }

    /// Largest constraint violation over every stored latent draw.
    pub fn max_constraint_violation(&self, constraints: &FieldConstraints<T>) -> T {
        (0..self.num_draws).map(|s| constraints.max_violation(self.latent_draw(s))).fold(T::zero(), T::max)
    }
}

/// Fits a compiled model in the configured mode.
pub fn fit_model<T: Real>(
    model: &LatentModel<T>,
    panel: &ObservationPanel,
    settings: &FitSettings,
) -> Result<PosteriorSamples<T>> {
    settings.validate()?;
    match settings.mode {
        InferenceMode::Mcmc => run_mcmc(model, panel, settings),
        InferenceMode::EmpiricalBayesLaplace => {
            let fit = fit_empirical_bayes(model, panel, settings)?;
            eb_samples(model, panel, &fit, settings)
        }
    }
}

/// Compiles `cfg` for the panel's grid and fits it.
pub fn fit<T: Real>(
    cfg: &ModelConfig,
    graph: &AreaGraph,
    panel: &ObservationPanel,
    settings: &FitSettings,
) -> Result<PosteriorSamples<T>> {
    if graph.num_areas() != panel.num_areas() {
        return Err(Error::Panel(format!(
            "graph has {} areas, panel has {}",
            graph.num_areas(),
            panel.num_areas()
        )));
    }
    let model = LatentModel::from_config(cfg, graph, panel.num_years())?;
    fit_model(&model, panel, settings)
}

/// Extends the panel by `horizon` fully missing years and fits over the
/// extended grid. `projected_populations` holds the new cells in grid order
/// (outcome, then year, then area).
pub fn forecast_horizon<T: Real>(
    cfg: &ModelConfig,
    graph: &AreaGraph,
    panel: &ObservationPanel,
    horizon: usize,
    projected_populations: &[f64],
    settings: &FitSettings,
) -> Result<PosteriorSamples<T>> {
    let extended = if horizon == 0 { panel.clone() } else { panel.extended(horizon, projected_populations)? };
    fit(cfg, graph, &extended, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grid_graph;
    use crate::model::{BlockLabel, LatentModelBuilder, Loading, ModelId};
    use crate::synthetic::{simulate_model, uniform_populations, Intercepts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Discrete, Poisson};

    fn quick() -> FitSettings {
        FitSettings { burn_in: 100, n_samples: 50, thin: 1, ..FitSettings::default() }
    }

    /// Intercept-only model: one flat α per outcome.
    fn intercept_model(grid: Grid) -> LatentModel<f64> {
        let mut b = LatentModelBuilder::new(grid);
        let ai = b.block(BlockLabel::AlphaI, 1, None, None, None).unwrap();
        let am = b.block(BlockLabel::AlphaM, 1, None, None, None).unwrap();
        for c in 0..grid.num_cells() {
            let (_, _, d) = grid.locate(c);
            b.term(c, if d == Disease::Incidence { ai } else { am }, Loading::One);
        }
        b.build().unwrap()
    }

    fn simulated(model: ModelId, seed: u64) -> (LatentModel<f64>, ObservationPanel) {
        let g = grid_graph(2, 3).unwrap();
        let m = LatentModel::from_config(&ModelConfig::new(model), &g, 4).unwrap();
        let pops = uniform_populations(m.grid(), 1e5);
        let (panel, _) = simulate_model(&m, 2001, &pops, &m.default_hyper(), Intercepts::default(), seed).unwrap();
        (m, panel)
    }

    #[test]
    fn single_cell_mode_is_log_crude_rate() {
        let grid = Grid::new(1, 1);
        let mut b = LatentModelBuilder::<f64>::new(grid);
        let a = b.block(BlockLabel::AlphaI, 1, None, None, None).unwrap();
        b.term(grid.cell(0, 0, Disease::Incidence), a, Loading::One);
        let m = b.build().unwrap();
        let panel = ObservationPanel::new(grid, 2001, vec![Some(37), None], vec![20_000.0, 20_000.0]).unwrap();
        let g = gaussian_approximation(&m, &panel, &[], LikelihoodKind::Poisson).unwrap();
        // the intercept ridge moves the mode by about ridge·α/μ
        assert!((g.mean()[0] - (37.0f64 / 20_000.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn doubling_counts_and_populations_keeps_the_rate() {
        let grid = Grid::new(2, 2);
        let m = intercept_model(grid);
        let counts: Vec<u64> = (0..8).map(|c| 40 + 7 * c as u64).collect();
        let pops: Vec<f64> = (0..8).map(|c| 1e5 + 1e4 * c as f64).collect();
        let p1 = ObservationPanel::new(grid, 2001, counts.iter().map(|&c| Some(c)).collect(), pops.clone()).unwrap();
        let p2 = ObservationPanel::new(
            grid,
            2001,
            counts.iter().map(|&c| Some(2 * c)).collect(),
            pops.iter().map(|n| 2.0 * n).collect(),
        )
        .unwrap();
        let m1 = gaussian_approximation(&m, &p1, &[], LikelihoodKind::Poisson).unwrap();
        let m2 = gaussian_approximation(&m, &p2, &[], LikelihoodKind::Poisson).unwrap();
        for k in 0..2 {
            assert!((m1.mean()[k] - m2.mean()[k]).abs() < 1e-6);
        }
        let total_i: u64 = (0..4).map(|c| counts[c]).sum();
        let pop_i: f64 = pops[..4].iter().sum();
        assert!((m1.mean()[0] - (total_i as f64 / pop_i).ln()).abs() < 1e-6);
    }

    #[test]
    fn likelihood_matches_cell_by_cell_sum() {
        let (m, mut panel) = simulated(ModelId::Model1, 4);
        panel.set_missing(1, 2, Disease::Incidence);
        let engine = LaplaceEngine::new(&m, &panel, LikelihoodKind::Poisson).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let field: Vec<f64> = (0..m.field_len()).map(|_| 0.1 * f64::std_normal(&mut rng) - 3.0).collect();
        let hyper = m.default_hyper();
        let got = engine.log_likelihood(&field, hyper.values());
        let mut naive = 0.0;
        for c in 0..m.grid().num_cells() {
            if let Some(y) = panel.counts()[c] {
                let eta = m.cell_predictor(&field, hyper.values(), c);
                naive += Poisson::new(panel.populations()[c] * eta.exp()).unwrap().ln_pmf(y);
            }
        }
        assert!(((got - naive) / naive).abs() < 1e-10, "{got} vs {naive}");
        assert_eq!(engine.num_likelihood_terms(), panel.num_observed());
    }

    #[test]
    fn quadratic_likelihood_makes_field_proposals_exact() {
        let (m, panel) = simulated(ModelId::Model1, 5);
        let settings = FitSettings { likelihood: LikelihoodKind::QuadraticSurrogate, ..quick() };
        let s = run_mcmc(&m, &panel, &settings).unwrap();
        assert!(s.diagnostics.field_acceptance >= 0.999, "{}", s.diagnostics.field_acceptance);
    }

    #[test]
    fn same_seed_gives_identical_samples() {
        let (m, panel) = simulated(ModelId::Model3, 6);
        let a = run_mcmc(&m, &panel, &quick()).unwrap();
        let b = run_mcmc(&m, &panel, &quick()).unwrap();
        assert_eq!(a, b);
        let c = run_mcmc(&m, &panel, &quick().with_seed(2)).unwrap();
        assert_ne!(a.hyper, c.hyper);
    }

    #[test]
    fn stored_draws_satisfy_constraints() {
        let (m, panel) = simulated(ModelId::Model2, 7);
        let s = run_mcmc(&m, &panel, &quick()).unwrap();
        let cons = FieldConstraints::from_layout(m.layout()).unwrap();
        assert!(s.max_constraint_violation(&cons) < 1e-8);
        assert!(s.diagnostics.field_acceptance > 0.0);
    }

    #[test]
    fn flat_data_gives_flat_spatial_field() {
        let g = grid_graph(3, 3).unwrap();
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model1), &g, 4).unwrap();
        let grid = m.grid();
        let panel = ObservationPanel::new(grid, 2001, vec![Some(100); grid.num_cells()], uniform_populations(grid, 1e5))
            .unwrap();
        let settings = FitSettings { mode: InferenceMode::EmpiricalBayesLaplace, ..FitSettings::default() };
        let fit = fit_empirical_bayes(&m, &panel, &settings).unwrap();
        let kappa = m.layout().read(fit.gaussian.mean(), BlockLabel::Kappa).unwrap();
        assert!(kappa.iter().all(|k| k.abs() < 0.01), "{kappa:?}");
    }

    #[test]
    fn predictive_mean_matches_population_times_rate() {
        let grid = Grid::new(1, 1);
        let s_total = 10_000;
        let log_rates = vec![1e-3f64.ln(); s_total * grid.num_cells()];
        let samples = PosteriorSamples::new(
            grid,
            2001,
            Vec::new(),
            0,
            Vec::new(),
            Vec::new(),
            log_rates,
            vec![0; s_total * grid.num_cells()],
            InferenceMode::Mcmc,
            Diagnostics::default(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pops = vec![1e5; grid.num_cells()];
        let draws = predictive_counts(&samples, &pops, &[0], &mut rng).unwrap();
        let mean = draws[0].iter().sum::<u64>() as f64 / s_total as f64;
        // standard error of the mean is √(100 / 10⁴) = 0.1
        assert!((mean - 100.0).abs() < 0.3, "{mean}");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert_eq!(draws, predictive_counts(&samples, &pops, &[0], &mut rng).unwrap());
    }

    #[test]
    fn forecast_with_zero_horizon_matches_plain_fit() {
        let g = grid_graph(2, 2).unwrap();
        let cfg = ModelConfig::new(ModelId::Model1);
        let m = LatentModel::<f64>::from_config(&cfg, &g, 3).unwrap();
        let pops = uniform_populations(m.grid(), 1e5);
        let (panel, _) = simulate_model(&m, 2001, &pops, &m.default_hyper(), Intercepts::default(), 2).unwrap();
        let a = forecast_horizon::<f64>(&cfg, &g, &panel, 0, &[], &quick()).unwrap();
        let b = fit::<f64>(&cfg, &g, &panel, &quick()).unwrap();
        assert_eq!(a, b);
        let extra = vec![1e5; 2 * 2 * g.num_areas()];
        let c = forecast_horizon::<f64>(&cfg, &g, &panel, 2, &extra, &quick()).unwrap();
        assert_eq!(c.grid().num_years, 5);
        assert!(forecast_horizon::<f64>(&cfg, &g, &panel, 2, &extra[1..], &quick()).is_err());
    }
}
