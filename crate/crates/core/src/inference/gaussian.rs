//! Constrained Gaussian approximations of the latent field.
//!
//! The precision used for factorization is the Laplace precision
//! `Q(θ) + Bᵀ W B` plus a small ridge: the intercept ridge on flat blocks and
//! `NULL_SPACE_RIDGE · τ` on every block whose structure is rank deficient.
//! The ridge only makes the matrix factorizable; the exact objective is used
//! for gradients, and the sum-to-zero constraints are imposed by conditioning
//! by kriging.

use std::sync::Arc;

use rand::Rng;

use crate::cholesky::{DenseCholesky, SparseCholesky, SymbolicCholesky};
use crate::error::{Error, Result};
use crate::model::{LatentLayout, LatentModel};
use crate::panel::ObservationPanel;
use crate::scalar::Real;
use crate::sparse::{sym_upper_matvec, CscMatrix};

use super::likelihood::{LikelihoodKind, ObservedCell};

/// Ridge on rank-deficient blocks, relative to the block precision.
pub const NULL_SPACE_RIDGE: f64 = 1e-7;

const MAX_NEWTON_ITER: usize = 50;
const MAX_HALVINGS: usize = 40;

fn newton_tol<T: Real>() -> T {
    T::lit(1e-8).max(T::solver_tol() * T::lit(100.0))
}

/// Sparse linear constraints `A x = 0` over a whole vector, with the factor
/// of `A Aᵀ`. Construction fails when the rows are linearly dependent.
#[derive(Debug, Clone)]
pub struct FieldConstraints<T> {
    dim: usize,
    rows: Vec<Vec<(usize, T)>>,
    gram: Option<DenseCholesky<T>>,
}

impl<T: PartialEq> PartialEq for FieldConstraints<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.rows == other.rows
    }
}

impl<T: Real> FieldConstraints<T> {
    fn from_rows(dim: usize, rows: Vec<Vec<(usize, T)>>) -> Result<Self> {
        let mut c = Self { dim, rows, gram: None };
        c.gram = c.gram_factor()?;
        Ok(c)
    }

    /// Collects the block constraints of a layout into field coordinates.
    pub fn from_layout(layout: &LatentLayout<T>) -> Result<Self> {
        let mut rows = Vec::new();
        for b in layout.blocks() {
            if let Some(cs) = &b.constraints {
                for r in cs.rows() {
                    rows.push(
                        r.iter()
                            .enumerate()
                            .filter(|(_, v)| **v != T::zero())
                            .map(|(j, &v)| (b.offset + j, v))
                            .collect(),
                    );
                }
            }
        }
        Self::from_rows(layout.total_len(), rows)
    }

    /// Dense rows of length `dim`.
    pub fn from_dense(dim: usize, rows: &[Vec<T>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("constraint row length differs from dimension".into()));
        }
        let rows = rows
            .iter()
            .map(|r| r.iter().enumerate().filter(|(_, v)| **v != T::zero()).map(|(j, &v)| (j, v)).collect())
            .collect();
        Self::from_rows(dim, rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn row_dot(&self, k: usize, x: &[T]) -> T {
        self.rows[k].iter().fold(T::zero(), |acc, &(j, v)| acc + v * x[j])
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.rows.len()).map(|k| self.row_dot(k, x)).collect()
    }

    pub fn max_violation(&self, x: &[T]) -> T {
        (0..self.rows.len()).map(|k| self.row_dot(k, x).abs()).fold(T::zero(), T::max)
    }

    fn dense_row(&self, k: usize) -> Vec<T> {
        let mut r = vec![T::zero(); self.dim];
        for &(j, v) in &self.rows[k] {
            r[j] += v;
        }
        r
    }

    /// Cholesky factor of `A Aᵀ` (`None` without constraints); fails when the
    /// rows are linearly dependent.
    fn gram_factor(&self) -> Result<Option<DenseCholesky<T>>> {
        let k = self.rows.len();
        if k == 0 {
            return Ok(None);
        }
        let dense: Vec<Vec<T>> = (0..k).map(|r| self.dense_row(r)).collect();
        let mut g = vec![T::zero(); k * k];
        for a in 0..k {
            for b in 0..k {
                g[a * k + b] = self.row_dot(b, &dense[a]);
            }
        }
        DenseCholesky::factor_with_tol(k, &g, T::solver_tol() * T::lit(10.0))
            .map(Some)
            .map_err(|_| Error::RankDeficientConstraints("constraint rows are linearly dependent".into()))
    }

    /// `log det(A Aᵀ)`.
    pub fn gram_log_det(&self) -> T {
        self.gram.as_ref().map_or(T::zero(), |c| c.log_det())
    }

    /// Subtracts `Aᵀ(AAᵀ)⁻¹A g` from `g`, leaving its component in the null
    /// space of `A` (the Euclidean projection onto `A x = 0`).
    pub fn project(&self, g: &mut [T]) {
        let Some(gram) = &self.gram else { return };
        let lambda = gram.solve(&self.apply(g));
        for (row, &l) in self.rows.iter().zip(&lambda) {
            for &(j, v) in row {
                g[j] -= l * v;
            }
        }
    }
}

/// Precomputed pieces of conditioning by kriging: `V = H⁻¹Aᵀ` and the
/// factor of `A V`.
#[derive(Debug, Clone)]
struct Kriging<T> {
    v: Vec<Vec<T>>,
    w: DenseCholesky<T>,
}

impl<T: Real> Kriging<T> {
    fn new(factor: &SparseCholesky<T>, constraints: &FieldConstraints<T>) -> Result<Option<Self>> {
        let k = constraints.num_rows();
        if k == 0 {
            return Ok(None);
        }
        let v: Vec<Vec<T>> = (0..k).map(|r| factor.solve(&constraints.dense_row(r))).collect();
        let mut w = vec![T::zero(); k * k];
        for a in 0..k {
            for b in a..k {
                let s = (constraints.row_dot(a, &v[b]) + constraints.row_dot(b, &v[a])) * T::lit(0.5);
                w[a * k + b] = s;
                w[b * k + a] = s;
            }
        }
        let w = DenseCholesky::factor_with_tol(k, &w, T::solver_tol() * T::lit(10.0)).map_err(|_| {
            Error::RankDeficientConstraints("A Q⁻¹ Aᵀ is singular; constraint rows are degenerate".into())
        })?;
        Ok(Some(Self { v, w }))
    }

    /// Replaces `x` by `x − V (AV)⁻¹ A x` and returns the multipliers.
    fn correct(&self, constraints: &FieldConstraints<T>, x: &mut [T]) -> Vec<T> {
        let lambda = self.w.solve(&constraints.apply(x));
        for (vk, &l) in self.v.iter().zip(&lambda) {
            for (xi, &vi) in x.iter_mut().zip(vk) {
                *xi -= l * vi;
            }
        }
        lambda
    }
}

/// Gaussian with sparse precision `H`, conditioned on `A x = 0`.
#[derive(Debug, Clone)]
pub struct ConstrainedGaussian<T> {
    mean: Vec<T>,
    precision: CscMatrix<T>,
    factor: SparseCholesky<T>,
    kriging: Option<Kriging<T>>,
    constraints: Arc<FieldConstraints<T>>,
}

impl<T: Real> ConstrainedGaussian<T> {
    /// `precision` holds the upper triangle. The mean is projected onto the
    /// constraint set under the precision metric.
    pub fn new(mean: &[T], precision: CscMatrix<T>, constraints: Arc<FieldConstraints<T>>) -> Result<Self> {
        let factor = SparseCholesky::factor(&precision)?;
        Self::from_parts(mean.to_vec(), precision, factor, constraints)
    }

    fn from_parts(
        mut mean: Vec<T>,
        precision: CscMatrix<T>,
        factor: SparseCholesky<T>,
        constraints: Arc<FieldConstraints<T>>,
    ) -> Result<Self> {
        if mean.len() != factor.dim() || constraints.dim() != factor.dim() {
            return Err(Error::InvalidArgument("mean, precision and constraints differ in dimension".into()));
        }
        let kriging = Kriging::new(&factor, &constraints)?;
        if let Some(k) = &kriging {
            k.correct(&constraints, &mut mean);
            constraints.project(&mut mean);
        }
        Ok(Self { mean, precision, factor, kriging, constraints })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Upper triangle of the (ridged) precision.
    pub fn precision(&self) -> &CscMatrix<T> {
        &self.precision
    }

    pub fn constraints(&self) -> &FieldConstraints<T> {
        &self.constraints
    }

    /// Projects `x` onto `A x = 0` along the precision metric. A Euclidean
    /// projection then removes the rounding left by the kriging step.
    pub fn correct(&self, x: &mut [T]) {
        if let Some(k) = &self.kriging {
            k.correct(&self.constraints, x);
            self.constraints.project(x);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut z = self.factor.sample_zero_mean(rng);
        self.correct(&mut z);
        for (zi, &m) in z.iter_mut().zip(&self.mean) {
            *zi += m;
        }
        z
    }

    /// Log density up to a constant, for points satisfying the constraints.
    pub fn log_kernel(&self, x: &[T]) -> T {
        let d: Vec<T> = x.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        let hd = sym_upper_matvec(&self.precision, &d);
        -T::lit(0.5) * crate::scalar::dot(&d, &hd)
    }

    /// Log determinant of the precision restricted to the constraint subspace
    /// (with an orthonormal basis): `log|H| + log|A H⁻¹ Aᵀ| − log|A Aᵀ|`.
    pub fn constrained_log_det(&self) -> T {
        let w = self.kriging.as_ref().map_or(T::zero(), |k| k.w.log_det());
        self.factor.log_det() + w - self.constraints.gram_log_det()
    }

    /// Solves `H x = b` with the unconstrained factor.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.factor.solve(b)
    }
}

/// One draw from `N(mean, precision⁻¹)` conditioned on `rows · x = 0`.
///
/// `precision` is the upper triangle of a positive definite matrix. Fails with
/// [`Error::RankDeficientConstraints`] when the rows are degenerate.
pub fn sample_constrained_gaussian<T: Real, R: Rng + ?Sized>(
    mean: &[T],
    precision: &CscMatrix<T>,
    rows: &[Vec<T>],
    rng: &mut R,
) -> Result<Vec<T>> {
    let constraints = Arc::new(FieldConstraints::from_dense(mean.len(), rows)?);
    let g = ConstrainedGaussian::new(mean, precision.clone(), constraints)?;
    Ok(g.sample(rng))
}

#[derive(Debug, Clone, Copy)]
enum Ridge {
    None,
    Fixed,
    Scaled(usize),
}

#[derive(Debug, Clone)]
struct PriorSlots<T> {
    precision: usize,
    entries: Vec<(usize, T)>,
}

/// Laplace machinery for one model and one panel: the observed cells, the
/// fixed sparsity pattern of the posterior precision and its symbolic
/// factorization.
#[derive(Debug, Clone)]
pub struct LaplaceEngine<'m, T> {
    model: &'m LatentModel<T>,
    likelihood: LikelihoodKind,
    observed: Vec<ObservedCell<T>>,
    pattern: CscMatrix<T>,
    symbolic: Arc<SymbolicCholesky>,
    prior_slots: Vec<PriorSlots<T>>,
    diag_slots: Vec<usize>,
    ridge: Vec<Ridge>,
    pair_ptr: Vec<usize>,
    pairs: Vec<(usize, usize, usize)>,
    constraints: Arc<FieldConstraints<T>>,
}

impl<'m, T: Real> LaplaceEngine<'m, T> {
    pub fn new(model: &'m LatentModel<T>, panel: &ObservationPanel, likelihood: LikelihoodKind) -> Result<Self> {
        let grid = model.grid();
        if panel.grid() != grid {
            return Err(Error::Panel(format!(
                "panel is {}×{} but the model expects {}×{}",
                panel.num_areas(),
                panel.num_years(),
                grid.num_areas,
                grid.num_years
            )));
        }
        let observed: Vec<ObservedCell<T>> = (0..grid.num_cells())
            .filter_map(|c| panel.counts()[c].map(|y| ObservedCell::new(c, y, panel.populations()[c])))
            .collect();
        if observed.is_empty() {
            return Err(Error::NoObservations("the panel has no observed cells".into()));
        }

        let layout = model.layout();
        let n = layout.total_len();
        // flat blocks are identified by data only
        let mut touched = vec![false; n];
        for o in &observed {
            for t in model.terms(o.cell) {
                touched[t.index] = true;
            }
        }
        for b in layout.blocks() {
            if b.structure.is_none() && b.range().any(|j| !touched[j]) {
                return Err(Error::NoObservations(format!(
                    "block {} has no observed cell; its flat prior leaves the posterior improper",
                    b.label.as_str()
                )));
            }
        }

        let mut trips: Vec<(usize, usize, T)> = (0..n).map(|j| (j, j, T::zero())).collect();
        let mut ridge = vec![Ridge::None; n];
        for b in layout.blocks() {
            match (&b.structure, b.precision) {
                (Some(s), Some(k)) => {
                    trips.extend(
                        s.matrix().iter().filter(|&(r, c, _)| r <= c).map(|(r, c, _)| (b.offset + r, b.offset + c, T::zero())),
                    );
                    if s.null_dim() > 0 {
                        b.range().for_each(|j| ridge[j] = Ridge::Scaled(k));
                    }
                }
                _ => b.range().for_each(|j| ridge[j] = Ridge::Fixed),
            }
        }
        for o in &observed {
            let ts = model.terms(o.cell);
            for p in ts {
                for q in ts {
                    if p.index <= q.index {
                        trips.push((p.index, q.index, T::zero()));
                    }
                }
            }
        }
        let pattern = CscMatrix::from_triplets(n, n, &trips)?;
        let slot = |r: usize, c: usize| pattern.position(r, c).expect("entry is in the pattern");

        let diag_slots = (0..n).map(|j| slot(j, j)).collect();
        let mut prior_slots = Vec::new();
        for b in layout.blocks() {
            if let (Some(s), Some(k)) = (&b.structure, b.precision) {
                let entries = s
                    .matrix()
                    .iter()
                    .filter(|&(r, c, _)| r <= c)
                    .map(|(r, c, v)| (slot(b.offset + r, b.offset + c), v))
                    .collect();
                prior_slots.push(PriorSlots { precision: k, entries });
            }
        }
        let mut pair_ptr = vec![0];
        let mut pairs = Vec::new();
        for o in &observed {
            let ts = model.terms(o.cell);
            for (a, p) in ts.iter().enumerate() {
                for (b, q) in ts.iter().enumerate() {
                    if p.index <= q.index {
                        pairs.push((slot(p.index, q.index), a, b));
                    }
                }
            }
            pair_ptr.push(pairs.len());
        }

        let symbolic = Arc::new(SymbolicCholesky::analyze(&pattern)?);
        let constraints = Arc::new(FieldConstraints::from_layout(layout)?);
        Ok(Self {
            model,
            likelihood,
            observed,
            pattern,
            symbolic,
            prior_slots,
            diag_slots,
            ridge,
            pair_ptr,
            pairs,
            constraints,
        })
    }

    pub fn model(&self) -> &'m LatentModel<T> {
        self.model
    }

    pub fn likelihood(&self) -> LikelihoodKind {
        self.likelihood
    }

    /// Cells entering the likelihood.
    pub fn observed(&self) -> &[ObservedCell<T>] {
        &self.observed
    }

    /// Number of likelihood terms (one per observed cell).
    pub fn num_likelihood_terms(&self) -> usize {
        self.observed.len()
    }

    pub fn constraints(&self) -> &Arc<FieldConstraints<T>> {
        &self.constraints
    }

    pub fn log_likelihood(&self, field: &[T], hyper: &[T]) -> T {
        self.observed
            .iter()
            .map(|o| self.likelihood.value(o, self.model.cell_predictor(field, hyper, o.cell)))
            .sum()
    }

    /// Unnormalized log posterior of field and hyperparameters.
    pub fn log_joint(&self, field: &[T], hyper: &[T]) -> T {
        self.log_likelihood(field, hyper) + self.model.log_field_prior(field, hyper) + self.model.log_hyper_prior(hyper)
    }

    /// A feasible starting field: zero effects and intercepts at the pooled
    /// log rate of the cells they enter.
    pub fn initial_field(&self, hyper: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.model.field_len()];
        for b in self.model.layout().blocks() {
            if b.structure.is_some() {
                continue;
            }
            for j in b.range() {
                let (mut y, mut n) = (T::zero(), T::zero());
                for o in &self.observed {
                    if let Some(t) = self.model.terms(o.cell).iter().find(|t| t.index == j) {
                        if self.model.loading(t.loading, hyper) == T::one() {
                            y += o.count;
                            n += o.population;
                        }
                    }
                }
                if n > T::zero() {
                    x[j] = ((y + T::lit(0.5)) / n).ln();
                }
            }
        }
        x
    }

    /// Upper triangle of `Q(θ) + ridge + Bᵀ diag(w) B`.
    fn assemble(&self, hyper: &[T], weights: &[T]) -> CscMatrix<T> {
        let mut h = self.pattern.clone();
        let vals = h.values_mut();
        vals.iter_mut().for_each(|v| *v = T::zero());
        for ps in &self.prior_slots {
            let tau = hyper[ps.precision];
            for &(s, v) in &ps.entries {
                vals[s] += tau * v;
            }
        }
        let null_ridge = T::lit(NULL_SPACE_RIDGE);
        for (j, r) in self.ridge.iter().enumerate() {
            match *r {
                Ridge::None => {}
                Ridge::Fixed => vals[self.diag_slots[j]] += self.model.ridge(),
                Ridge::Scaled(k) => vals[self.diag_slots[j]] += null_ridge * hyper[k],
            }
        }
        for (k, o) in self.observed.iter().enumerate() {
            let ts = self.model.terms(o.cell);
            let w = weights[k];
            for &(s, a, b) in &self.pairs[self.pair_ptr[k]..self.pair_ptr[k + 1]] {
                vals[s] += w * self.model.loading(ts[a].loading, hyper) * self.model.loading(ts[b].loading, hyper);
            }
        }
        h
    }

    /// Exact prior precision times `x` (flat intercepts contribute nothing);
    /// adds `|τ R| |x|` to `magnitude`.
    fn prior_matvec(&self, field: &[T], hyper: &[T], magnitude: &mut [T]) -> Vec<T> {
        let mut out = vec![T::zero(); field.len()];
        for b in self.model.layout().blocks() {
            if let (Some(s), Some(k)) = (&b.structure, b.precision) {
                let tau = hyper[k];
                for (r, c, v) in s.matrix().iter() {
                    let term = tau * v * field[b.offset + c];
                    out[b.offset + r] += term;
                    magnitude[b.offset + r] += term.abs();
                }
            }
        }
        out
    }

    fn objective(&self, field: &[T], hyper: &[T]) -> T {
        self.log_likelihood(field, hyper) + self.model.log_field_prior(field, hyper)
    }

    /// Newton iterations for the constrained mode of the field given the
    /// hyperparameters, returning the Gaussian approximation at the mode.
    /// `start` should satisfy the constraints; otherwise the engine starts
    /// from [`LaplaceEngine::initial_field`].
    pub fn approximate(&self, hyper: &[T], start: Option<&[T]>) -> Result<ConstrainedGaussian<T>> {
        let n = self.model.field_len();
        let tol = newton_tol::<T>();
        let feasible_tol = T::lit(1e-6);
        let mut x = match start {
            Some(s) if s.len() == n && self.constraints.max_violation(s) <= feasible_tol => s.to_vec(),
            _ => self.initial_field(hyper),
        };
        let mut f = self.objective(&x, hyper);
        if !f.is_finite() {
            x = self.initial_field(hyper);
            f = self.objective(&x, hyper);
        }
        let m = self.observed.len();
        let mut grads = vec![T::zero(); m];
        let mut weights = vec![T::zero(); m];

        for iter in 0..MAX_NEWTON_ITER {
            let mut lik_grad = vec![T::zero(); n];
            // magnitude of the summands of each gradient entry, for a
            // residual test that is relative to what rounding can resolve
            let mut magnitude = vec![T::zero(); n];
            let mut objective_magnitude = f.abs();
            for (k, o) in self.observed.iter().enumerate() {
                let eta = self.model.cell_predictor(&x, hyper, o.cell);
                let t = self.likelihood.eval(o, eta);
                objective_magnitude += t.magnitude;
                grads[k] = t.grad;
                weights[k] = t.weight;
                for term in self.model.terms(o.cell) {
                    let contrib = self.model.loading(term.loading, hyper) * t.grad;
                    lik_grad[term.index] += contrib;
                    magnitude[term.index] += contrib.abs();
                }
            }
            let qx = self.prior_matvec(&x, hyper, &mut magnitude);
            let mut g: Vec<T> = lik_grad.iter().zip(&qx).map(|(&a, &b)| a - b).collect();
            // Stationarity on the constraint set means g ∈ row(A). Dropping the
            // row-space part changes neither the test nor the constrained step
            // and keeps the ridge-sized null directions out of the solve.
            self.constraints.project(&mut g);
            let scale = magnitude.iter().fold(T::one(), |a, &b| a.max(b));
            let resid = g.iter().fold(T::zero(), |a, &b| a.max(b.abs()));
            log::trace!("newton {iter}: residual {:e}, scale {:e}, objective {f}", resid.as_f64(), scale.as_f64());

            let h = self.assemble(hyper, &weights);
            let factor = SparseCholesky::factor_with(self.symbolic.clone(), &h)?;
            if resid <= tol * scale {
                return ConstrainedGaussian::from_parts(x, h, factor, self.constraints.clone());
            }
            let kriging = Kriging::new(&factor, &self.constraints)?;
            let mut d = factor.solve(&g);
            if let Some(k) = &kriging {
                k.correct(&self.constraints, &mut d);
            }

            let slope = crate::scalar::dot(&g, &d);
            // rounding level of the objective; a predicted gain (half the
            // Newton decrement) below it cannot be realised or verified
            let slack = T::lit(8.0) * T::epsilon() * objective_magnitude;
            if slope * T::lit(0.5) <= slack {
                return ConstrainedGaussian::from_parts(x, h, factor, self.constraints.clone());
            }
            let mut step = T::one();
            let mut accepted = false;
            let mut stalled = false;
            for _ in 0..MAX_HALVINGS {
                let cand: Vec<T> = x.iter().zip(&d).map(|(&a, &b)| a + step * b).collect();
                let fc = self.objective(&cand, hyper);
                if fc.is_finite() && fc >= f + T::lit(1e-4) * step * slope - slack {
                    stalled = (fc - f).abs() <= slack;
                    x = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                step *= T::lit(0.5);
            }
            if !accepted || stalled {
                // no further progress is possible at working precision
                if resid <= T::lit(1e-6).max(tol) * scale {
                    return ConstrainedGaussian::from_parts(x, h, factor, self.constraints.clone());
                }
                if !accepted {
                    log::debug!("line search failed at hyperparameters {hyper:?}");
                    return Err(Error::NewtonDivergence { iterations: iter + 1 });
                }
            }
        }
        log::debug!("no convergence at hyperparameters {hyper:?}");
        Err(Error::NewtonDivergence { iterations: MAX_NEWTON_ITER })
    }
}

/// Mode and Gaussian approximation of the field given hyperparameters.
pub fn gaussian_approximation<T: Real>(
    model: &LatentModel<T>,
    panel: &ObservationPanel,
    hyper: &[T],
    likelihood: LikelihoodKind,
) -> Result<ConstrainedGaussian<T>> {
    LaplaceEngine::new(model, panel, likelihood)?.approximate(hyper, None)
}
