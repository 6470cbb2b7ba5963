//! Latent field layout, priors and linear predictors of the shared
//! component models.
//!
//! Every model is compiled into a [`LatentModel`]: a set of Gaussian latent
//! blocks (each with a structure matrix, a precision hyperparameter and
//! sum-to-zero constraints), a list of hyperparameters with their priors, and
//! for every grid cell the sparse list of latent terms that make up its log
//! rate. Scalings (δ, ς, ϱ) enter only through term loadings, so the field is
//! Gaussian conditional on the hyperparameters.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    constraints_for, icar_constraints, icar_structure, interaction_structure, rw1_constraints, rw1_structure,
    AreaGraph, ConstraintSet, InteractionType, StructureMatrix,
};
use crate::panel::{Disease, Grid};
use crate::scalar::Real;
use crate::sparse::CscMatrix;

/// Ridge precision on intercepts, standing in for a flat prior.
pub const INTERCEPT_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelId {
    Model1,
    Model2,
    Model3,
    AdditiveBaseline,
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelId::Model1 => "model1",
            ModelId::Model2 => "model2",
            ModelId::Model3 => "model3",
            ModelId::AdditiveBaseline => "additive",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "model1" | "1" => Ok(ModelId::Model1),
            "model2" | "2" => Ok(ModelId::Model2),
            "model3" | "3" => Ok(ModelId::Model3),
            "additive" | "additivebaseline" | "baseline" => Ok(ModelId::AdditiveBaseline),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// User-facing model choice and prior settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model: ModelId,
    /// `None` only for the additive baseline.
    pub interaction: Option<InteractionType>,
    /// Model 1: one precision for both outcome-specific interactions.
    pub shared_interaction_precision: bool,
    /// Model 3: number of distinct ϱ_t; later years reuse the last one.
    pub num_rho: usize,
    /// Upper bound of the uniform prior on standard deviations.
    pub sd_prior_upper: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
}

impl ModelConfig {
    /// Defaults: type II interaction, separate precisions, one ϱ, σ ~ U(0, 10),
    /// scalings ~ Gamma(10, 10).
    pub fn new(model: ModelId) -> Self {
        Self {
            model,
            interaction: (model != ModelId::AdditiveBaseline).then_some(InteractionType::II),
            shared_interaction_precision: false,
            num_rho: 1,
            sd_prior_upper: 10.0,
            gamma_shape: 10.0,
            gamma_rate: 10.0,
        }
    }

    pub fn with_interaction(mut self, ty: InteractionType) -> Self {
        self.interaction = Some(ty);
        self
    }

    pub fn validate(&self, num_years: usize) -> Result<()> {
        match (self.model, self.interaction) {
            (ModelId::AdditiveBaseline, Some(_)) => {
                return Err(Error::Config("the additive baseline has no interaction term".into()))
            }
            (ModelId::Model1 | ModelId::Model2 | ModelId::Model3, None) => {
                return Err(Error::Config(format!("{} requires an interaction type", self.model)))
            }
            _ => {}
        }
        if self.num_rho == 0 || self.num_rho > num_years {
            return Err(Error::Config(format!("num_rho must lie in [1, {num_years}], got {}", self.num_rho)));
        }
        if !(self.sd_prior_upper > 0.0) || !(self.gamma_shape > 0.0) || !(self.gamma_rate > 0.0) {
            return Err(Error::Config("prior parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Name of a latent block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockLabel {
    AlphaI,
    AlphaM,
    Kappa,
    U,
    GammaI,
    GammaM,
    GammaShared,
    ChiI,
    ChiM,
    ChiShared,
}

impl BlockLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockLabel::AlphaI => "alpha_I",
            BlockLabel::AlphaM => "alpha_M",
            BlockLabel::Kappa => "kappa",
            BlockLabel::U => "u",
            BlockLabel::GammaI => "gamma_I",
            BlockLabel::GammaM => "gamma_M",
            BlockLabel::GammaShared => "gamma",
            BlockLabel::ChiI => "chi_I",
            BlockLabel::ChiM => "chi_M",
            BlockLabel::ChiShared => "chi",
        }
    }
}

/// Name of a hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HyperLabel {
    TauKappa,
    TauU,
    TauGammaI,
    TauGammaM,
    TauGamma,
    TauChiI,
    TauChiM,
    TauChi,
    Delta,
    Varsigma,
    /// ϱ for the given (0-based) year group.
    Rho(usize),
}

impl HyperLabel {
    pub fn is_precision(self) -> bool {
        !matches!(self, HyperLabel::Delta | HyperLabel::Varsigma | HyperLabel::Rho(_))
    }

    pub fn name(self) -> String {
        match self {
            HyperLabel::TauKappa => "tau_kappa".into(),
            HyperLabel::TauU => "tau_u".into(),
            HyperLabel::TauGammaI => "tau_gamma_I".into(),
            HyperLabel::TauGammaM => "tau_gamma_M".into(),
            HyperLabel::TauGamma => "tau_gamma".into(),
            HyperLabel::TauChiI => "tau_chi_I".into(),
            HyperLabel::TauChiM => "tau_chi_M".into(),
            HyperLabel::TauChi => "tau_chi".into(),
            HyperLabel::Delta => "delta".into(),
            HyperLabel::Varsigma => "varsigma".into(),
            HyperLabel::Rho(k) => format!("rho_{}", k + 1),
        }
    }
}

impl fmt::Display for HyperLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Prior on a positive hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HyperPrior<T> {
    /// σ = τ^{-1/2} ~ Uniform(0, upper), expressed as a density on τ.
    UniformSd { upper: T },
    Gamma { shape: T, rate: T },
}

impl<T: Real> HyperPrior<T> {
    /// Log density at `value` on its natural (not log) scale.
    pub fn log_density(&self, value: T) -> T {
        if !(value > T::zero()) {
            return T::neg_infinity();
        }
        match *self {
            HyperPrior::UniformSd { upper } => {
                if value < (upper * upper).recip() {
                    return T::neg_infinity();
                }
                // |dσ/dτ| = τ^{-3/2} / 2
                -upper.ln() - T::LN_2() - T::lit(1.5) * value.ln()
            }
            HyperPrior::Gamma { shape, rate } => {
                shape * rate.ln() - shape.lgamma() + (shape - T::one()) * value.ln() - rate * value
            }
        }
    }

    /// Smallest value with positive density.
    pub fn lower_bound(&self) -> T {
        match *self {
            HyperPrior::UniformSd { upper } => (upper * upper).recip(),
            HyperPrior::Gamma { .. } => T::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperSpec<T> {
    pub label: HyperLabel,
    pub prior: HyperPrior<T>,
}

/// Values of all hyperparameters of one model, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<T> {
    labels: Vec<HyperLabel>,
    values: Vec<T>,
}

impl<T: Real> HyperParams<T> {
    pub fn new(labels: Vec<HyperLabel>, values: Vec<T>) -> Result<Self> {
        if labels.len() != values.len() {
            return Err(Error::InvalidArgument("hyperparameter labels and values differ in length".into()));
        }
        let hp = Self { labels, values };
        hp.check_positive()?;
        Ok(hp)
    }

    pub fn check_positive(&self) -> Result<()> {
        for (l, v) in self.labels.iter().zip(&self.values) {
            if !(*v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("hyperparameter {l} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> &[HyperLabel] {
        &self.labels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, label: HyperLabel) -> Option<usize> {
        self.labels.iter().position(|&l| l == label)
    }

    pub fn get(&self, label: HyperLabel) -> Option<T> {
        self.index_of(label).map(|k| self.values[k])
    }

    pub fn set(&mut self, label: HyperLabel, value: T) -> Result<()> {
        let k = self
            .index_of(label)
            .ok_or_else(|| Error::InvalidArgument(format!("model has no hyperparameter {label}")))?;
        self.values[k] = value;
        Ok(())
    }
}

/// One Gaussian block of the latent field.
#[derive(Debug, Clone)]
pub struct LatentBlock<T> {
    pub label: BlockLabel,
    pub offset: usize,
    pub len: usize,
    /// `None` for intercepts (flat prior).
    pub structure: Option<Arc<StructureMatrix<T>>>,
    pub constraints: Option<Arc<ConstraintSet<T>>>,
    /// Index of the precision hyperparameter scaling `structure`.
    pub precision: Option<usize>,
}

impl<T> LatentBlock<T> {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, contiguous blocks of the latent field.
#[derive(Debug, Clone)]
pub struct LatentLayout<T> {
    blocks: Vec<LatentBlock<T>>,
    total: usize,
}

impl<T: Real> LatentLayout<T> {
    pub fn blocks(&self) -> &[LatentBlock<T>] {
        &self.blocks
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn block(&self, label: BlockLabel) -> Option<&LatentBlock<T>> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn read<'a>(&self, field: &'a [T], label: BlockLabel) -> Option<&'a [T]> {
        self.block(label).map(|b| &field[b.range()])
    }

    pub fn write(&self, field: &mut [T], label: BlockLabel, values: &[T]) -> Result<()> {
        let b = self
            .block(label)
            .ok_or_else(|| Error::InvalidArgument(format!("layout has no block {}", label.as_str())))?;
        if values.len() != b.len {
            return Err(Error::InvalidArgument(format!(
                "block {} has length {}, got {}",
                label.as_str(),
                b.len,
                values.len()
            )));
        }
        field[b.range()].copy_from_slice(values);
        Ok(())
    }

    /// Largest absolute violation of any block constraint.
    pub fn max_constraint_violation(&self, field: &[T]) -> T {
        self.blocks
            .iter()
            .filter_map(|b| b.constraints.as_ref().map(|c| c.max_violation(&field[b.range()])))
            .fold(T::zero(), T::max)
    }
}

/// How a latent term is weighted in a cell's log rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loading {
    One,
    /// Multiply by hyperparameter `k`.
    Scale(usize),
    /// Divide by hyperparameter `k`.
    InvScale(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    pub index: usize,
    pub loading: Loading,
}

/// One configured value of every random effect plus the hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub field: Vec<T>,
    pub hyper: HyperParams<T>,
}

/// A compiled latent Gaussian model over an area × year × outcome grid.
#[derive(Debug, Clone)]
pub struct LatentModel<T> {
    grid: Grid,
    layout: LatentLayout<T>,
    hypers: Vec<HyperSpec<T>>,
    term_ptr: Vec<usize>,
    terms: Vec<Term>,
    offsets: Vec<T>,
    ridge: T,
    config: Option<ModelConfig>,
}

/// Incremental construction of custom latent models.
pub struct LatentModelBuilder<T> {
    grid: Grid,
    blocks: Vec<LatentBlock<T>>,
    total: usize,
    hypers: Vec<HyperSpec<T>>,
    cell_terms: Vec<Vec<Term>>,
    offsets: Vec<T>,
}

impl<T: Real> LatentModelBuilder<T> {
    pub fn new(grid: Grid) -> Self {
        Self {
            grid,
            blocks: Vec::new(),
            total: 0,
            hypers: Vec::new(),
            cell_terms: vec![Vec::new(); grid.num_cells()],
            offsets: vec![T::zero(); grid.num_cells()],
        }
    }

    /// Registers a hyperparameter and returns its index.
    pub fn hyper(&mut self, label: HyperLabel, prior: HyperPrior<T>) -> usize {
        self.hypers.push(HyperSpec { label, prior });
        self.hypers.len() - 1
    }

    /// Appends a block and returns its offset in the field.
    pub fn block(
        &mut self,
        label: BlockLabel,
        len: usize,
        structure: Option<StructureMatrix<T>>,
        constraints: Option<ConstraintSet<T>>,
        precision: Option<usize>,
    ) -> Result<usize> {
        if let Some(s) = &structure {
            if s.dim() != len {
                return Err(Error::Config(format!("block {} structure has wrong dimension", label.as_str())));
            }
            if precision.is_none() {
                return Err(Error::Config(format!("block {} has a structure but no precision", label.as_str())));
            }
            let rows = constraints.as_ref().map_or(0, |c| c.num_rows());
            if rows < s.null_dim() {
                return Err(Error::Config(format!(
                    "block {} is rank deficient by {} but carries {rows} constraints",
                    label.as_str(),
                    s.null_dim()
                )));
            }
        }
        if let Some(c) = &constraints {
            if c.block_len() != len {
                return Err(Error::Config(format!("block {} constraints have wrong length", label.as_str())));
            }
        }
        if precision.is_some_and(|k| k >= self.hypers.len()) {
            return Err(Error::Config("precision index out of range".into()));
        }
        let offset = self.total;
        self.blocks.push(LatentBlock {
            label,
            offset,
            len,
            structure: structure.map(Arc::new),
            constraints: constraints.map(Arc::new),
            precision,
        });
        self.total += len;
        Ok(offset)
    }

    pub fn term(&mut self, cell: usize, index: usize, loading: Loading) {
        self.cell_terms[cell].push(Term { index, loading });
    }

    pub fn offset(&mut self, cell: usize, value: T) {
        self.offsets[cell] = value;
    }

    pub fn build(self) -> Result<LatentModel<T>> {
        let mut term_ptr = Vec::with_capacity(self.cell_terms.len() + 1);
        let mut terms = Vec::new();
        term_ptr.push(0);
        for ts in self.cell_terms {
            for t in &ts {
                if t.index >= self.total {
                    return Err(Error::Config(format!("term index {} outside field", t.index)));
                }
                if let Loading::Scale(k) | Loading::InvScale(k) = t.loading {
                    if k >= self.hypers.len() || self.hypers[k].label.is_precision() {
                        return Err(Error::Config("term loading must reference a scaling".into()));
                    }
                }
            }
            terms.extend(ts);
            term_ptr.push(terms.len());
        }
        Ok(LatentModel {
            grid: self.grid,
            layout: LatentLayout { blocks: self.blocks, total: self.total },
            hypers: self.hypers,
            term_ptr,
            terms,
            offsets: self.offsets,
            ridge: T::lit(INTERCEPT_RIDGE),
            config: None,
        })
    }
}

impl<T: Real> LatentModel<T> {
    /// Compiles one of the configured models for `graph` and `num_years` years.
    pub fn from_config(cfg: &ModelConfig, graph: &AreaGraph, num_years: usize) -> Result<Self> {
        cfg.validate(num_years)?;
        let na = graph.num_areas();
        if na < 2 || num_years < 2 {
            return Err(Error::Config("models need at least two areas and two years".into()));
        }
        let grid = Grid::new(na, num_years);
        let mut b = LatentModelBuilder::new(grid);
        let sd_prior = HyperPrior::UniformSd { upper: T::lit(cfg.sd_prior_upper) };
        let gamma_prior = HyperPrior::Gamma { shape: T::lit(cfg.gamma_shape), rate: T::lit(cfg.gamma_rate) };

        let r_kappa: StructureMatrix<T> = icar_structure(graph)?;
        let r_gamma: StructureMatrix<T> = rw1_structure(num_years)?;
        let q_chi = cfg.interaction.map(|ty| interaction_structure(ty, &r_gamma, &r_kappa)).transpose()?;
        let chi_constraints =
            cfg.interaction.map(|ty| constraints_for::<T>(ty, graph, num_years)).transpose()?;

        // precisions first, then scalings
        let tau_kappa = b.hyper(HyperLabel::TauKappa, sd_prior);
        let tau_u = b.hyper(HyperLabel::TauU, sd_prior);
        let (tau_gamma_i, tau_gamma_m, tau_gamma) = match cfg.model {
            ModelId::Model1 | ModelId::AdditiveBaseline => (
                Some(b.hyper(HyperLabel::TauGammaI, sd_prior)),
                Some(b.hyper(HyperLabel::TauGammaM, sd_prior)),
                None,
            ),
            ModelId::Model2 => (None, None, Some(b.hyper(HyperLabel::TauGamma, sd_prior))),
            ModelId::Model3 => (None, Some(b.hyper(HyperLabel::TauGammaM, sd_prior)), None),
        };
        let (tau_chi_i, tau_chi_m, tau_chi) = match cfg.model {
            ModelId::Model1 | ModelId::Model2 if cfg.shared_interaction_precision => {
                let k = b.hyper(HyperLabel::TauChi, sd_prior);
                (Some(k), Some(k), None)
            }
            ModelId::Model1 | ModelId::Model2 => (
                Some(b.hyper(HyperLabel::TauChiI, sd_prior)),
                Some(b.hyper(HyperLabel::TauChiM, sd_prior)),
                None,
            ),
            ModelId::Model3 => (None, None, Some(b.hyper(HyperLabel::TauChi, sd_prior))),
            ModelId::AdditiveBaseline => (None, None, None),
        };
        let delta = b.hyper(HyperLabel::Delta, gamma_prior);
        let varsigma = (cfg.model == ModelId::Model2).then(|| b.hyper(HyperLabel::Varsigma, gamma_prior));
        let rhos: Vec<usize> = if cfg.model == ModelId::Model3 {
            (0..cfg.num_rho).map(|k| b.hyper(HyperLabel::Rho(k), gamma_prior)).collect()
        } else {
            Vec::new()
        };

        let alpha_i = b.block(BlockLabel::AlphaI, 1, None, None, None)?;
        let alpha_m = b.block(BlockLabel::AlphaM, 1, None, None, None)?;
        let kappa = b.block(BlockLabel::Kappa, na, Some(r_kappa), Some(icar_constraints(graph)), Some(tau_kappa))?;
        let u = b.block(BlockLabel::U, na, Some(StructureMatrix::identity(na)), None, Some(tau_u))?;

        let rw = || rw1_structure::<T>(num_years);
        let mut gamma_i = None;
        let mut gamma_m = None;
        let mut gamma_shared = None;
        if let Some(k) = tau_gamma_i {
            gamma_i = Some(b.block(BlockLabel::GammaI, num_years, Some(rw()?), Some(rw1_constraints(num_years)), Some(k))?);
        }
        if let Some(k) = tau_gamma {
            gamma_shared =
                Some(b.block(BlockLabel::GammaShared, num_years, Some(rw()?), Some(rw1_constraints(num_years)), Some(k))?);
        }
        if let Some(k) = tau_gamma_m {
            gamma_m = Some(b.block(BlockLabel::GammaM, num_years, Some(rw()?), Some(rw1_constraints(num_years)), Some(k))?);
        }

        let nat = na * num_years;
        let mut chi_i = None;
        let mut chi_m = None;
        let mut chi_shared = None;
        if let (Some(q), Some(c)) = (&q_chi, &chi_constraints) {
            match cfg.model {
                ModelId::Model1 | ModelId::Model2 => {
                    chi_i = Some(b.block(BlockLabel::ChiI, nat, Some(q.clone()), Some(c.clone()), tau_chi_i)?);
                    chi_m = Some(b.block(BlockLabel::ChiM, nat, Some(q.clone()), Some(c.clone()), tau_chi_m)?);
                }
                ModelId::Model3 => {
                    chi_shared = Some(b.block(BlockLabel::ChiShared, nat, Some(q.clone()), Some(c.clone()), tau_chi)?);
                }
                ModelId::AdditiveBaseline => {}
            }
        }

        for t in 0..num_years {
            let rho = rhos.get(t.min(rhos.len().saturating_sub(1))).copied();
            for i in 0..na {
                let ci = grid.cell(i, t, Disease::Incidence);
                let cm = grid.cell(i, t, Disease::Mortality);
                b.term(ci, alpha_i, Loading::One);
                b.term(cm, alpha_m, Loading::One);
                b.term(ci, kappa + i, Loading::Scale(delta));
                b.term(cm, kappa + i, Loading::InvScale(delta));
                b.term(cm, u + i, Loading::One);
                if let Some(g) = gamma_i {
                    b.term(ci, g + t, Loading::One);
                }
                if let Some(g) = gamma_m {
                    b.term(cm, g + t, Loading::One);
                }
                if let (Some(g), Some(s)) = (gamma_shared, varsigma) {
                    b.term(ci, g + t, Loading::Scale(s));
                    b.term(cm, g + t, Loading::InvScale(s));
                }
                if let Some(c) = chi_i {
                    b.term(ci, c + t * na + i, Loading::One);
                }
                if let Some(c) = chi_m {
                    b.term(cm, c + t * na + i, Loading::One);
                }
                if let (Some(c), Some(r)) = (chi_shared, rho) {
                    b.term(ci, c + t * na + i, Loading::Scale(r));
                    b.term(cm, c + t * na + i, Loading::InvScale(r));
                }
            }
        }
        let mut model = b.build()?;
        model.config = Some(cfg.clone());
        Ok(model)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn layout(&self) -> &LatentLayout<T> {
        &self.layout
    }

    pub fn config(&self) -> Option<&ModelConfig> {
        self.config.as_ref()
    }

    pub fn hyper_specs(&self) -> &[HyperSpec<T>] {
        &self.hypers
    }

    pub fn hyper_labels(&self) -> Vec<HyperLabel> {
        self.hypers.iter().map(|h| h.label).collect()
    }

    pub fn ridge(&self) -> T {
        self.ridge
    }

    pub fn terms(&self, cell: usize) -> &[Term] {
        &self.terms[self.term_ptr[cell]..self.term_ptr[cell + 1]]
    }

    pub fn offset(&self, cell: usize) -> T {
        self.offsets[cell]
    }

    pub fn field_len(&self) -> usize {
        self.layout.total
    }

    /// Hyperparameters with every precision and scaling at one.
    pub fn default_hyper(&self) -> HyperParams<T> {
        HyperParams { labels: self.hyper_labels(), values: vec![T::one(); self.hypers.len()] }
    }

    pub fn hyper_from_values(&self, values: Vec<T>) -> Result<HyperParams<T>> {
        HyperParams::new(self.hyper_labels(), values)
    }

    fn check_hyper(&self, hyper: &HyperParams<T>) {
        debug_assert_eq!(hyper.labels, self.hyper_labels());
    }

    #[inline]
    pub fn loading(&self, loading: Loading, hyper: &[T]) -> T {
        match loading {
            Loading::One => T::one(),
            Loading::Scale(k) => hyper[k],
            Loading::InvScale(k) => hyper[k].recip(),
        }
    }

    /// Log rate of cell `(area, year, disease)`.
    pub fn linear_predictor(
        &self,
        field: &[T],
        hyper: &HyperParams<T>,
        area: usize,
        year: usize,
        disease: Disease,
    ) -> T {
        self.cell_predictor(field, hyper.values(), self.grid.cell(area, year, disease))
    }

    #[inline]
    pub fn cell_predictor(&self, field: &[T], hyper: &[T], cell: usize) -> T {
        self.terms(cell)
            .iter()
            .fold(self.offsets[cell], |acc, t| acc + self.loading(t.loading, hyper) * field[t.index])
    }

    /// Log rates of every cell.
    pub fn predictor_all(&self, field: &[T], hyper: &[T]) -> Vec<T> {
        (0..self.grid.num_cells()).map(|c| self.cell_predictor(field, hyper, c)).collect()
    }

    /// Gaussian log density of the field given precisions, up to a constant
    /// that does not depend on the hyperparameters. Rank-deficient blocks use
    /// the pseudo-determinant exponent; intercepts are flat.
    pub fn log_field_prior(&self, field: &[T], hyper: &[T]) -> T {
        let half = T::lit(0.5);
        let mut acc = T::zero();
        for b in &self.layout.blocks {
            if let (Some(s), Some(k)) = (&b.structure, b.precision) {
                let tau = hyper[k];
                let q = s.quad_form(&field[b.range()]);
                acc += half * T::lit(s.rank() as f64) * tau.ln() - half * tau * q;
            }
        }
        acc
    }

    /// Sum of hyperprior log densities.
    pub fn log_hyper_prior(&self, hyper: &[T]) -> T {
        self.hypers.iter().zip(hyper).map(|(h, &v)| h.prior.log_density(v)).sum()
    }

    /// Unnormalized joint log prior of field and hyperparameters.
    pub fn log_prior(&self, field: &[T], hyper: &HyperParams<T>) -> T {
        self.check_hyper(hyper);
        self.log_field_prior(field, hyper.values()) + self.log_hyper_prior(hyper.values())
    }

    /// Block-diagonal prior precision of the field given the hyperparameters,
    /// with the intercept ridge on flat blocks.
    pub fn joint_prior_precision(&self, hyper: &HyperParams<T>) -> CscMatrix<T> {
        self.check_hyper(hyper);
        let mut trips = Vec::new();
        for b in &self.layout.blocks {
            match (&b.structure, b.precision) {
                (Some(s), Some(k)) => {
                    let tau = hyper.values()[k];
                    trips.extend(s.matrix().iter().map(|(r, c, v)| (b.offset + r, b.offset + c, tau * v)));
                }
                _ => trips.extend(b.range().map(|j| (j, j, self.ridge))),
            }
        }
        let n = self.layout.total;
        CscMatrix::from_triplets(n, n, &trips).expect("blocks lie inside the field")
    }

    /// Rebuilds the same configured model for a different number of years.
    pub fn with_years(&self, graph: &AreaGraph, num_years: usize) -> Result<Self> {
        let cfg = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("custom models cannot be rebuilt for a new horizon".into()))?;
        Self::from_config(cfg, graph, num_years)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grid_graph;

    fn path3() -> AreaGraph {
        AreaGraph::new(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let m1 = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model1), &path3(), 2).unwrap();
        assert_eq!(m1.field_len(), 2 + 3 + 3 + 2 + 2 + 6 + 6);
        let m3 = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model3), &path3(), 2).unwrap();
        assert_eq!(m3.field_len(), 2 + 3 + 3 + 2 + 6);

        let g2 = AreaGraph::new(2, &[(0, 1)]).unwrap();
        let m2 = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model2), &g2, 2).unwrap();
        let gammas: Vec<_> = m2
            .layout()
            .blocks()
            .iter()
            .filter(|b| matches!(b.label, BlockLabel::GammaI | BlockLabel::GammaM | BlockLabel::GammaShared))
            .collect();
        assert_eq!(gammas.len(), 1);
        assert_eq!((gammas[0].label, gammas[0].len), (BlockLabel::GammaShared, 2));

        let base = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::AdditiveBaseline), &path3(), 2).unwrap();
        assert_eq!(base.field_len(), 2 + 3 + 3 + 2 + 2);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::new(ModelId::Model3);
        c.interaction = None;
        assert!(LatentModel::<f64>::from_config(&c, &path3(), 3).is_err());
        let c = ModelConfig::new(ModelId::AdditiveBaseline).with_interaction(InteractionType::I);
        assert!(LatentModel::<f64>::from_config(&c, &path3(), 3).is_err());
        let mut c = ModelConfig::new(ModelId::Model3);
        c.num_rho = 4;
        assert!(LatentModel::<f64>::from_config(&c, &path3(), 3).is_err());
    }

    #[test]
    fn contiguous_offsets_and_constraint_coverage() {
        for id in [ModelId::Model1, ModelId::Model2, ModelId::Model3, ModelId::AdditiveBaseline] {
            for ty in [InteractionType::I, InteractionType::II, InteractionType::III, InteractionType::IV] {
                let mut cfg = ModelConfig::new(id);
                if id != ModelId::AdditiveBaseline {
                    cfg.interaction = Some(ty);
                }
                let m = LatentModel::<f64>::from_config(&cfg, &grid_graph(2, 3).unwrap(), 4).unwrap();
                let mut next = 0;
                for b in m.layout().blocks() {
                    assert_eq!(b.offset, next);
                    next += b.len;
                    if let Some(s) = &b.structure {
                        let rows = b.constraints.as_ref().map_or(0, |c| c.num_rows());
                        assert!(rows >= s.null_dim());
                    }
                }
                assert_eq!(next, m.field_len());
            }
        }
    }

    #[test]
    fn zero_field_gives_intercept() {
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model1), &path3(), 2).unwrap();
        let mut field = vec![0.0; m.field_len()];
        m.layout().write(&mut field, BlockLabel::AlphaI, &[-7.0]).unwrap();
        let h = m.default_hyper();
        for i in 0..3 {
            for t in 0..2 {
                assert_eq!(m.linear_predictor(&field, &h, i, t, Disease::Incidence), -7.0);
            }
        }
    }

    #[test]
    fn model3_hand_evaluation() {
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model3), &path3(), 2).unwrap();
        let mut field = vec![0.0; m.field_len()];
        m.layout().write(&mut field, BlockLabel::Kappa, &[0.1, 0.0, -0.1]).unwrap();
        let mut chi = vec![0.0; 6];
        chi[0] = 0.4;
        m.layout().write(&mut field, BlockLabel::ChiShared, &chi).unwrap();
        let mut h = m.default_hyper();
        h.set(HyperLabel::Delta, 2.0).unwrap();
        h.set(HyperLabel::Rho(0), 0.5).unwrap();
        let eta_i = m.linear_predictor(&field, &h, 0, 0, Disease::Incidence);
        assert!((eta_i - 0.4).abs() < 1e-15);
        let eta_m = m.linear_predictor(&field, &h, 0, 0, Disease::Mortality);
        assert!((eta_m - (0.1 / 2.0 + 0.4 / 0.5)).abs() < 1e-15);
    }

    #[test]
    fn rho_reuses_last_group() {
        let mut cfg = ModelConfig::new(ModelId::Model3);
        cfg.num_rho = 2;
        let m = LatentModel::<f64>::from_config(&cfg, &path3(), 4).unwrap();
        let rho_of = |t: usize| {
            let cell = m.grid().cell(0, t, Disease::Incidence);
            m.terms(cell).iter().find_map(|term| match term.loading {
                Loading::Scale(k) if m.hyper_specs()[k].label != HyperLabel::Delta => Some(m.hyper_specs()[k].label),
                _ => None,
            })
        };
        assert_eq!(rho_of(0), Some(HyperLabel::Rho(0)));
        assert_eq!(rho_of(1), Some(HyperLabel::Rho(1)));
        assert_eq!(rho_of(3), Some(HyperLabel::Rho(1)));
    }

    #[test]
    fn gamma_log_density_at_one() {
        let p = HyperPrior::Gamma { shape: 10.0f64, rate: 10.0 };
        let expect = 10.0 * 10f64.ln() - statrs::function::gamma::ln_gamma(10.0) - 10.0;
        assert!((p.log_density(1.0) - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_sd_prior_support() {
        let p = HyperPrior::UniformSd { upper: 10.0f64 };
        assert_eq!(p.log_density(0.005), f64::NEG_INFINITY);
        // density of τ when σ ~ U(0,10): (1/10)·τ^{-3/2}/2
        let tau: f64 = 4.0;
        assert!((p.log_density(tau) - (0.1 * 0.5 * tau.powf(-1.5)).ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_precision_blocks() {
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model1), &path3(), 3).unwrap();
        let mut h = m.default_hyper();
        let q1 = m.joint_prior_precision(&h);
        let kb = m.layout().block(BlockLabel::Kappa).unwrap().clone();
        let rk = kb.structure.as_ref().unwrap().matrix().clone();
        for (r, c, v) in rk.iter() {
            assert_eq!(q1.get(kb.offset + r, kb.offset + c), v);
        }
        h.set(HyperLabel::TauKappa, 4.0).unwrap();
        let q4 = m.joint_prior_precision(&h);
        for (r, c, v) in rk.iter() {
            assert_eq!(q4.get(kb.offset + r, kb.offset + c), 4.0 * v);
        }
        assert_eq!(q4.nrows(), m.field_len());
        assert_eq!(q4.get(0, 0), INTERCEPT_RIDGE);
    }

    #[test]
    fn zero_field_prior_is_hyperprior_only() {
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model2), &path3(), 3).unwrap();
        let h = m.default_hyper();
        let field = vec![0.0; m.field_len()];
        assert_eq!(m.log_prior(&field, &h), m.log_hyper_prior(h.values()));
    }

    #[test]
    fn doubling_kappa_quadruples_quadratic_term() {
        let m = LatentModel::<f64>::from_config(&ModelConfig::new(ModelId::Model1), &path3(), 2).unwrap();
        let h = m.default_hyper();
        let mut f = vec![0.0; m.field_len()];
        m.layout().write(&mut f, BlockLabel::Kappa, &[0.3, -0.1, -0.2]).unwrap();
        let base = m.log_field_prior(&vec![0.0; m.field_len()], h.values());
        let q1 = base - m.log_field_prior(&f, h.values());
        m.layout().write(&mut f, BlockLabel::Kappa, &[0.6, -0.2, -0.4]).unwrap();
        let q2 = base - m.log_field_prior(&f, h.values());
        assert!((q2 - 4.0 * q1).abs() < 1e-12);
    }
}
