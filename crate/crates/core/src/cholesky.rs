//! Sparse Cholesky factorization with a minimum-degree ordering.
//!
//! The symbolic phase (ordering, elimination tree, column counts) depends only
//! on the sparsity pattern and is computed once; numeric factorizations reuse
//! it as long as the matrix keeps the same pattern.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::sparse::CscMatrix;

/// Greedy minimum-degree ordering of a symmetric pattern. Returns `perm`
/// where `perm[k]` is the original index eliminated at step `k`. Ties go to
/// the lowest index, so the ordering is deterministic.
pub fn minimum_degree_order<T: Real>(upper: &CscMatrix<T>) -> Vec<usize> {
    let n = upper.ncols();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for (r, c, _) in upper.iter() {
        if r != c {
            adj[r].insert(c);
            adj[c].insert(r);
        }
    }
    let mut queue: BTreeSet<(usize, usize)> = (0..n).map(|v| (adj[v].len(), v)).collect();
    let mut eliminated = vec![false; n];
    let mut perm = Vec::with_capacity(n);

    while let Some((_, v)) = queue.pop_first() {
        eliminated[v] = true;
        perm.push(v);
        let nbrs: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &nbrs {
            queue.remove(&(adj[u].len(), u));
        }
        for &u in &nbrs {
            adj[u].remove(&v);
        }
        // neighbours of v form a clique in the elimination graph
        for (k, &a) in nbrs.iter().enumerate() {
            for &b in &nbrs[k + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &u in &nbrs {
            debug_assert!(!eliminated[u]);
            queue.insert((adj[u].len(), u));
        }
    }
    perm
}

/// Pattern-only part of a factorization.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    /// `pinv[original] = permuted index`.
    pinv: Vec<usize>,
    parent: Vec<Option<usize>>,
    l_col_ptr: Vec<usize>,
    /// For each entry of the permuted upper matrix (in the source's storage
    /// order): its permuted column and row, with row ≤ col.
    perm_entries: Vec<(usize, usize)>,
    c_col_ptr: Vec<usize>,
    /// Maps a source value position to its slot in the permuted matrix.
    c_slot: Vec<usize>,
    c_row_idx: Vec<usize>,
    source_col_ptr: Vec<usize>,
    source_row_idx: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analyzes the upper triangle of a symmetric matrix.
    pub fn analyze<T: Real>(upper: &CscMatrix<T>) -> Result<Self> {
        let n = upper.ncols();
        if upper.nrows() != n {
            return Err(Error::InvalidArgument("matrix must be square".into()));
        }
        if upper.iter().any(|(r, c, _)| r > c) {
            return Err(Error::InvalidArgument("expected upper-triangular storage".into()));
        }
        let perm = minimum_degree_order(upper);
        let mut pinv = vec![0usize; n];
        for (k, &v) in perm.iter().enumerate() {
            pinv[v] = k;
        }

        // permuted upper pattern C = P A Pᵀ
        let perm_entries: Vec<(usize, usize)> = upper
            .iter()
            .map(|(r, c, _)| {
                let (a, b) = (pinv[r], pinv[c]);
                (a.max(b), a.min(b))
            })
            .collect();
        let mut order: Vec<usize> = (0..perm_entries.len()).collect();
        order.sort_by_key(|&k| perm_entries[k]);
        let mut c_col_ptr = vec![0usize; n + 1];
        let mut c_row_idx = Vec::with_capacity(order.len());
        let mut c_slot = vec![0usize; order.len()];
        for &k in &order {
            let (col, row) = perm_entries[k];
            c_slot[k] = c_row_idx.len();
            c_row_idx.push(row);
            c_col_ptr[col + 1] += 1;
        }
        for c in 0..n {
            c_col_ptr[c + 1] += c_col_ptr[c];
        }

        let parent = etree(n, &c_col_ptr, &c_row_idx);

        // column counts of L by walking each row subtree
        let mut counts = vec![1usize; n];
        let mut mark = vec![usize::MAX; n];
        for k in 0..n {
            mark[k] = k;
            for p in c_col_ptr[k]..c_col_ptr[k + 1] {
                let mut i = c_row_idx[p];
                while i < k && mark[i] != k {
                    counts[i] += 1;
                    mark[i] = k;
                    i = parent[i].expect("row subtree reaches k");
                }
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + counts[j];
        }

        Ok(Self {
            n,
            pinv,
            parent,
            l_col_ptr,
            perm_entries,
            c_col_ptr,
            c_slot,
            c_row_idx,
            source_col_ptr: upper.col_ptr().to_vec(),
            source_row_idx: upper.row_idx().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries in the factor.
    pub fn factor_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    fn matches<T: Real>(&self, upper: &CscMatrix<T>) -> bool {
        upper.col_ptr() == self.source_col_ptr.as_slice() && upper.row_idx() == self.source_row_idx.as_slice()
    }
}

fn etree(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Vec<Option<usize>> {
    let mut parent = vec![None; n];
    let mut ancestor: Vec<Option<usize>> = vec![None; n];
    for k in 0..n {
        for p in col_ptr[k]..col_ptr[k + 1] {
            let mut i = row_idx[p];
            while i < k {
                let next = ancestor[i];
                ancestor[i] = Some(k);
                match next {
                    None => {
                        parent[i] = Some(k);
                        break;
                    }
                    Some(a) if a == k => break,
                    Some(a) => i = a,
                }
            }
        }
    }
    parent
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct SparseCholesky<T> {
    symbolic: Arc<SymbolicCholesky>,
    l_row_idx: Vec<usize>,
    l_values: Vec<T>,
}

impl<T: Real> SparseCholesky<T> {
    /// Analyzes and factors in one go.
    pub fn factor(upper: &CscMatrix<T>) -> Result<Self> {
        let symbolic = Arc::new(SymbolicCholesky::analyze(upper)?);
        Self::factor_with(symbolic, upper)
    }

    /// Numeric factorization reusing a symbolic analysis of the same pattern.
    pub fn factor_with(symbolic: Arc<SymbolicCholesky>, upper: &CscMatrix<T>) -> Result<Self> {
        if !symbolic.matches(upper) {
            return Err(Error::InvalidArgument("matrix pattern differs from symbolic analysis".into()));
        }
        let s = &*symbolic;
        let n = s.n;
        let mut c_values = vec![T::zero(); s.c_row_idx.len()];
        for (k, &v) in upper.values().iter().enumerate() {
            c_values[s.c_slot[k]] = v;
        }
        debug_assert_eq!(s.perm_entries.len(), upper.nnz());

        let lp = &s.l_col_ptr;
        let mut li = vec![0usize; lp[n]];
        let mut lx = vec![T::zero(); lp[n]];
        let mut next: Vec<usize> = lp[..n].to_vec();
        let mut x = vec![T::zero(); n];
        let mut mark = vec![usize::MAX; n];
        let mut stack = vec![0usize; n];
        let mut path = Vec::with_capacity(n);

        for k in 0..n {
            // nonzero pattern of row k of L, in topological order
            let mut top = n;
            mark[k] = k;
            for p in s.c_col_ptr[k]..s.c_col_ptr[k + 1] {
                let i0 = s.c_row_idx[p];
                x[i0] = c_values[p];
                let mut i = i0;
                path.clear();
                while i < k && mark[i] != k {
                    path.push(i);
                    mark[i] = k;
                    i = s.parent[i].expect("row subtree reaches k");
                }
                while let Some(j) = path.pop() {
                    top -= 1;
                    stack[top] = j;
                }
            }
            let mut d = x[k];
            x[k] = T::zero();
            for &j in &stack[top..n] {
                let lkj = x[j] / lx[lp[j]];
                x[j] = T::zero();
                for p in lp[j] + 1..next[j] {
                    x[li[p]] -= lx[p] * lkj;
                }
                d -= lkj * lkj;
                let slot = next[j];
                li[slot] = k;
                lx[slot] = lkj;
                next[j] += 1;
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: k });
            }
            let slot = next[k];
            li[slot] = k;
            lx[slot] = d.sqrt();
            next[k] += 1;
        }
        Ok(Self { symbolic, l_row_idx: li, l_values: lx })
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn log_det(&self) -> T {
        let lp = &self.symbolic.l_col_ptr;
        let two = T::lit(2.0);
        (0..self.dim()).map(|j| two * self.l_values[lp[j]].ln()).sum()
    }

    fn forward(&self, y: &mut [T]) {
        let lp = &self.symbolic.l_col_ptr;
        for j in 0..self.dim() {
            y[j] /= self.l_values[lp[j]];
            let yj = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                y[self.l_row_idx[p]] -= self.l_values[p] * yj;
            }
        }
    }

    fn backward(&self, y: &mut [T]) {
        let lp = &self.symbolic.l_col_ptr;
        for j in (0..self.dim()).rev() {
            let mut acc = y[j];
            for p in lp[j] + 1..lp[j + 1] {
                acc -= self.l_values[p] * y[self.l_row_idx[p]];
            }
            y[j] = acc / self.l_values[lp[j]];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let pinv = &self.symbolic.pinv;
        let mut y = vec![T::zero(); self.dim()];
        for (i, &bi) in b.iter().enumerate() {
            y[pinv[i]] = bi;
        }
        self.forward(&mut y);
        self.backward(&mut y);
        pinv.iter().map(|&k| y[k]).collect()
    }

    /// Draws `x ~ N(0, A⁻¹)`.
    pub fn sample_zero_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let mut y: Vec<T> = (0..self.dim()).map(|_| T::std_normal(rng)).collect();
        self.backward(&mut y);
        self.symbolic.pinv.iter().map(|&k| y[k]).collect()
    }
}

/// Dense Cholesky for the small constraint systems.
#[derive(Debug, Clone)]
pub struct DenseCholesky<T> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> DenseCholesky<T> {
    /// `a` is row-major `n × n`.
    pub fn factor(n: usize, a: &[T]) -> Result<Self> {
        Self::factor_with_tol(n, a, T::zero())
    }

    /// Like [`DenseCholesky::factor`], but also rejects pivots below
    /// `rel_tol` times the matching diagonal entry (numerical rank loss).
    pub fn factor_with_tol(n: usize, a: &[T], rel_tol: T) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![T::zero(); n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > T::zero()) || !d.is_finite() || d <= rel_tol * a[j * n + j] {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.n).map(|i| two * self.l[i * self.n + i].ln()).sum()
    }
}
