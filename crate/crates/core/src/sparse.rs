//! Compressed sparse column matrices.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Compressed sparse column matrix with sorted row indices in every column.
///
/// Symmetric matrices are stored with both triangles unless a function says
/// otherwise (the factorization works on the upper triangle only).
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix<T> {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> CscMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed;
    /// explicit zeros are kept so the pattern is exactly the triplet pattern.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({r}, {c}) outside {nrows}x{ncols}"
                )));
            }
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![T::zero(); triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[c];
            rows[slot] = r;
            vals[slot] = v;
            next[c] += 1;
        }

        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        col_ptr.push(0);
        let mut scratch: Vec<(usize, T)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend((counts[c]..counts[c + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_by_key(|&(r, _)| r);
            for &(r, v) in &scratch {
                if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Ok(Self { nrows, ncols, col_ptr, row_idx, values })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, col_ptr: vec![0; ncols + 1], row_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Entries of column `c` as `(row, value)` pairs.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        (self.col_ptr[c]..self.col_ptr[c + 1]).map(move |p| (self.row_idx[p], self.values[p]))
    }

    /// All stored entries as `(row, col, value)`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.ncols).flat_map(move |c| self.column(c).map(move |(r, v)| (r, c, v)))
    }

    /// Position of `(row, col)` in the value array, if stored.
    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.col_ptr[col];
        let hi = self.col_ptr[col + 1];
        self.row_idx[lo..hi].binary_search(&row).ok().map(|k| lo + k)
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.position(row, col).map_or(T::zero(), |p| self.values[p])
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(Error::InvalidArgument("matrix dimensions differ".into()));
        }
        let trips: Vec<_> = self.iter().chain(other.iter()).collect();
        Self::from_triplets(self.nrows, self.ncols, &trips)
    }

    pub fn transpose(&self) -> Self {
        let trips: Vec<_> = self.iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &trips).expect("transpose stays in bounds")
    }

    /// Kronecker product `self ⊗ rhs`: entry `(p·m + q, r·n + s) = self[p,r]·rhs[q,s]`.
    pub fn kron(&self, rhs: &Self) -> Self {
        let mut trips = Vec::with_capacity(self.nnz() * rhs.nnz());
        for (p, r, a) in self.iter() {
            for (q, s, b) in rhs.iter() {
                trips.push((p * rhs.nrows + q, r * rhs.ncols + s, a * b));
            }
        }
        Self::from_triplets(self.nrows * rhs.nrows, self.ncols * rhs.ncols, &trips)
            .expect("kronecker indices stay in bounds")
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![T::zero(); self.nrows];
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == T::zero() {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * xc;
            }
        }
        y
    }

    /// `xᵀ M x` for a fully stored matrix.
    pub fn quad_form(&self, x: &[T]) -> T {
        assert_eq!(x.len(), self.ncols);
        let mut acc = T::zero();
        for c in 0..self.ncols {
            let mut col = T::zero();
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                col += self.values[p] * x[self.row_idx[p]];
            }
            acc += col * x[c];
        }
        acc
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.nrows == self.ncols && self.iter().all(|(r, c, v)| (v - self.get(c, r)).abs() <= tol)
    }

    /// Upper triangle (row ≤ col) of a square matrix.
    pub fn upper(&self) -> Self {
        let trips: Vec<_> = self.iter().filter(|&(r, c, _)| r <= c).collect();
        Self::from_triplets(self.nrows, self.ncols, &trips).expect("same bounds")
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.ncols]; self.nrows];
        for (r, c, v) in self.iter() {
            d[r][c] += v;
        }
        d
    }

    pub fn row_sums(&self) -> Vec<T> {
        let mut s = vec![T::zero(); self.nrows];
        for (r, _, v) in self.iter() {
            s[r] += v;
        }
        s
    }
}

/// `y = M x` where only the upper triangle of a symmetric `M` is stored.
pub fn sym_upper_matvec<T: Real>(upper: &CscMatrix<T>, x: &[T]) -> Vec<T> {
    let n = upper.ncols();
    let mut y = vec![T::zero(); n];
    for c in 0..n {
        for (r, v) in upper.column(c) {
            y[r] += v * x[c];
            if r != c {
                y[c] += v * x[r];
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = CscMatrix::from_triplets(2, 2, &[(1, 0, 1.0), (0, 0, 2.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.get(0, 0), 2.0);
        assert_eq!(m.get(0, 1), 0.0);
    }

    #[test]
    fn out_of_bounds_triplet_rejected() {
        assert!(CscMatrix::<f64>::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn kron_matches_definition() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0)]).unwrap();
        let b = CscMatrix::from_triplets(2, 2, &[(0, 0, 5.0), (1, 0, 7.0)]).unwrap();
        let k = a.kron(&b);
        for p in 0..2 {
            for r in 0..2 {
                for q in 0..2 {
                    for s in 0..2 {
                        assert_eq!(k.get(p * 2 + q, r * 2 + s), a.get(p, r) * b.get(q, s));
                    }
                }
            }
        }
    }

    #[test]
    fn upper_matvec_agrees_with_full() {
        let m = CscMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 2.0), (2, 2, 1.0), (0, 2, 0.5), (2, 0, 0.5)],
        )
        .unwrap();
        let x = [1.0f64, -2.0, 3.0];
        assert_eq!(sym_upper_matvec(&m.upper(), &x), m.matvec(&x));
        assert!((m.quad_form(&x) - crate::scalar::dot(&x, &m.matvec(&x))).abs() < 1e-12);
    }
}
