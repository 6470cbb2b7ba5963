//! Simulation of observation panels from known model parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::AreaGraph;
use crate::inference::{draw_poisson, ConstrainedGaussian, FieldConstraints, NULL_SPACE_RIDGE};
use crate::model::{BlockLabel, HyperLabel, HyperParams, LatentModel, ModelConfig};
use crate::panel::{Grid, ObservationPanel};
use crate::scalar::Real;
use crate::sparse::CscMatrix;

/// Intercepts used when simulating (log rates per person-year).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intercepts {
    pub incidence: f64,
    pub mortality: f64,
}

impl Default for Intercepts {
    /// About 111 and 91 cases per 100,000 person-years.
    fn default() -> Self {
        Self { incidence: -6.8, mortality: -7.0 }
    }
}

/// Everything that generated a simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth<T> {
    pub config: Option<ModelConfig>,
    pub hyper: HyperParams<T>,
    pub field: Vec<T>,
    /// Log rates of every cell, in grid order.
    pub log_rates: Vec<T>,
    /// Generated counts of every cell (none missing).
    pub counts: Vec<u64>,
}

impl<T: Real> SimulationTruth<T> {
    pub fn rate(&self, cell: usize) -> T {
        self.log_rates[cell].exp()
    }
}

/// Same population in every cell.
pub fn uniform_populations(grid: Grid, population: f64) -> Vec<f64> {
    vec![population; grid.num_cells()]
}

/// Draws the latent field from its prior (structured blocks conditioned on
/// their constraints, intercepts fixed) and counts `Poisson(n·r)`.
pub fn simulate_model<T: Real>(
    model: &LatentModel<T>,
    first_year: i32,
    populations: &[f64],
    hyper: &HyperParams<T>,
    intercepts: Intercepts,
    seed: u64,
) -> Result<(ObservationPanel, SimulationTruth<T>)> {
    let grid = model.grid();
    if populations.len() != grid.num_cells() {
        return Err(Error::InvalidArgument(format!(
            "expected {} populations, got {}",
            grid.num_cells(),
            populations.len()
        )));
    }
    if hyper.labels() != model.hyper_labels().as_slice() {
        return Err(Error::InvalidArgument("hyperparameters do not belong to this model".into()));
    }
    hyper.check_positive()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![T::zero(); model.field_len()];

    for b in model.layout().blocks() {
        match (&b.structure, b.precision) {
            (Some(s), Some(k)) => {
                let tau = hyper.values()[k];
                let ridge = if s.null_dim() > 0 { T::lit(NULL_SPACE_RIDGE) } else { T::zero() };
                let trips: Vec<_> = s
                    .matrix()
                    .iter()
                    .filter(|&(r, c, _)| r <= c)
                    .map(|(r, c, v)| (r, c, tau * v))
                    .chain((0..b.len).map(|j| (j, j, tau * ridge)))
                    .collect();
                let precision = CscMatrix::from_triplets(b.len, b.len, &trips)?;
                let rows: Vec<Vec<T>> = b.constraints.as_ref().map_or(Vec::new(), |c| c.rows().to_vec());
                let constraints = Arc::new(FieldConstraints::from_dense(b.len, &rows)?);
                let g = ConstrainedGaussian::new(&vec![T::zero(); b.len], precision, constraints)?;
                field[b.range()].copy_from_slice(&g.sample(&mut rng));
            }
            _ => {
                let v = match b.label {
                    BlockLabel::AlphaI => intercepts.incidence,
                    BlockLabel::AlphaM => intercepts.mortality,
                    _ => 0.0,
                };
                field[b.range()].iter_mut().for_each(|x| *x = T::lit(v));
            }
        }
    }

    let log_rates = model.predictor_all(&field, hyper.values());
    let mut counts = Vec::with_capacity(grid.num_cells());
    for (c, eta) in log_rates.iter().enumerate() {
        counts.push(draw_poisson(populations[c] * eta.as_f64().exp(), &mut rng)?);
    }
    let panel = ObservationPanel::new(grid, first_year, counts.iter().map(|&c| Some(c)).collect(), populations.to_vec())?;
    let truth = SimulationTruth { config: model.config().cloned(), hyper: hyper.clone(), field, log_rates, counts };
    Ok((panel, truth))
}

/// Simulation value of a hyperparameter that is not set explicitly: a
/// smooth spatial field with weaker temporal and interaction terms.
pub fn default_simulation_value(label: HyperLabel) -> f64 {
    match label {
        HyperLabel::TauKappa => 4.0,
        HyperLabel::TauU => 25.0,
        HyperLabel::TauGammaI | HyperLabel::TauGammaM | HyperLabel::TauGamma => 100.0,
        HyperLabel::TauChiI | HyperLabel::TauChiM | HyperLabel::TauChi => 200.0,
        HyperLabel::Delta | HyperLabel::Varsigma | HyperLabel::Rho(_) => 1.0,
    }
}

/// Hyperparameters of `model` at their simulation defaults, with the values
/// in `named` (keyed by [`HyperLabel::name`]) overriding them.
pub fn simulation_hyper<T: Real>(model: &LatentModel<T>, named: &BTreeMap<String, f64>) -> Result<HyperParams<T>> {
    let labels = model.hyper_labels();
    let mut values: Vec<T> = labels.iter().map(|&l| T::lit(default_simulation_value(l))).collect();
    for (name, &v) in named {
        let k = labels
            .iter()
            .position(|l| &l.name() == name)
            .ok_or_else(|| Error::Config(format!("model has no hyperparameter `{name}`")))?;
        values[k] = T::lit(v);
    }
    model.hyper_from_values(values)
}

/// Compiles `cfg` on `graph` and simulates `num_years` years.
#[allow(clippy::too_many_arguments)]
pub fn simulate<T: Real>(
    cfg: &ModelConfig,
    graph: &AreaGraph,
    num_years: usize,
    first_year: i32,
    populations: &[f64],
    hyper: &HyperParams<T>,
    intercepts: Intercepts,
    seed: u64,
) -> Result<(ObservationPanel, SimulationTruth<T>)> {
    let model = LatentModel::from_config(cfg, graph, num_years)?;
    simulate_model(&model, first_year, populations, hyper, intercepts, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grid_graph;
    use crate::model::ModelId;
    use crate::panel::Disease;

    #[test]
    fn huge_precisions_give_intercept_rates() {
        let g = grid_graph(2, 3).unwrap();
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model1), &g, 4).unwrap();
        let mut h = m.default_hyper();
        for (k, l) in m.hyper_labels().iter().enumerate() {
            if l.is_precision() {
                h.values_mut()[k] = 1e8;
            }
        }
        let pops = uniform_populations(m.grid(), 1e5);
        let (_, truth) = simulate_model(&m, 2001, &pops, &h, Intercepts::default(), 3).unwrap();
        for c in 0..m.grid().num_cells() {
            let (_, _, d) = m.grid().locate(c);
            let base = if d == Disease::Incidence { -6.8f64 } else { -7.0 };
            assert!((truth.rate(c) / base.exp() - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn constraints_hold_and_seed_determines_output() {
        let g = grid_graph(3, 4).unwrap();
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model3), &g, 5).unwrap();
        let h = m.default_hyper();
        let pops = uniform_populations(m.grid(), 1e5);
        let (p1, t1) = simulate_model(&m, 2001, &pops, &h, Intercepts::default(), 9).unwrap();
        let (p2, t2) = simulate_model(&m, 2001, &pops, &h, Intercepts::default(), 9).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1, t2);
        let kappa = m.layout().read(&t1.field, BlockLabel::Kappa).unwrap();
        assert!(kappa.iter().sum::<f64>().abs() < 1e-8);
        assert!(m.layout().max_constraint_violation(&t1.field) < 1e-8);
    }
}
