//! Affine scalar and matrix expressions over the scalar entries of a
//! program's variables.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// `Σ coef_i · x[index_i] + constant`, terms sorted by index with no duplicates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineExpr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(index: usize) -> Self {
        Self { terms: vec![(index, 1.0)], constant: 0.0 }
    }

    /// Builds from arbitrary (possibly repeated, unsorted) terms.
    pub fn from_terms(terms: impl IntoIterator<Item = (usize, f64)>, constant: f64) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, c) in terms {
            *acc.entry(i).or_insert(0.0) += c;
        }
        Self { terms: acc.into_iter().filter(|&(_, c)| c != 0.0).collect(), constant }
    }

    /// `Σ w_k · e_k`.
    pub fn combination<'a>(parts: impl IntoIterator<Item = (f64, &'a AffineExpr)>) -> Self {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let mut constant = 0.0;
        for (w, e) in parts {
            if w == 0.0 {
                continue;
            }
            constant += w * e.constant;
            for &(i, c) in &e.terms {
                *acc.entry(i).or_insert(0.0) += w * c;
            }
        }
        Self { terms: acc.into_iter().filter(|&(_, c)| c != 0.0).collect(), constant }
    }

    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn constant_term(&self) -> f64 {
        self.constant
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.terms.last().map(|&(i, _)| i)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|&(i, c)| c * x[i]).sum::<f64>()
    }

    pub fn add(&self, other: &AffineExpr) -> Self {
        Self::combination([(1.0, self), (1.0, other)])
    }

    pub fn sub(&self, other: &AffineExpr) -> Self {
        Self::combination([(1.0, self), (-1.0, other)])
    }

    pub fn scale(&self, w: f64) -> Self {
        Self::combination([(w, self)])
    }

    pub fn plus_constant(&self, c: f64) -> Self {
        Self { terms: self.terms.clone(), constant: self.constant + c }
    }

    /// Entrywise approximate equality of coefficients and constant.
    pub fn approx_eq(&self, other: &AffineExpr, tol: f64) -> bool {
        let diff = self.sub(other);
        diff.constant.abs() <= tol && diff.terms.iter().all(|&(_, c)| c.abs() <= tol)
    }
}

/// Dense `rows × cols` matrix of affine expressions, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatExpr {
    rows: usize,
    cols: usize,
    entries: Vec<AffineExpr>,
}

impl MatExpr {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> AffineExpr) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self { rows, cols, entries }
    }

    pub fn constant(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| AffineExpr::constant(m[(i, j)]))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| AffineExpr::default())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> &AffineExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[AffineExpr] {
        &self.entries
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    pub fn add(&self, other: &MatExpr) -> Self {
        assert_eq!(self.shape(), other.shape(), "MatExpr::add shape mismatch");
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j).add(other.get(i, j)))
    }

    pub fn sub(&self, other: &MatExpr) -> Self {
        assert_eq!(self.shape(), other.shape(), "MatExpr::sub shape mismatch");
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j).sub(other.get(i, j)))
    }

    pub fn add_constant(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(self.shape(), m.shape(), "MatExpr::add_constant shape mismatch");
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j).plus_constant(m[(i, j)]))
    }

    pub fn scale(&self, w: f64) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j).scale(w))
    }

    /// `C · self` for a constant matrix `C`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(c.ncols(), self.rows, "MatExpr::left_mul shape mismatch");
        Self::from_fn(c.nrows(), self.cols, |i, j| {
            AffineExpr::combination((0..self.rows).map(|p| (c[(i, p)], self.get(p, j))))
        })
    }

    /// `self · C` for a constant matrix `C`.
    pub fn right_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(self.cols, c.nrows(), "MatExpr::right_mul shape mismatch");
        Self::from_fn(self.rows, c.ncols(), |i, j| {
            AffineExpr::combination((0..self.cols).map(|p| (c[(p, j)], self.get(i, p))))
        })
    }

    /// `aᵀ · self · a`.
    pub fn quad_form(&self, a: &DVector<f64>) -> AffineExpr {
        assert!(self.rows == a.len() && self.cols == a.len(), "MatExpr::quad_form shape mismatch");
        AffineExpr::combination((0..self.rows).flat_map(|i| (0..self.cols).map(move |j| (a[i] * a[j], self.get(i, j)))))
    }

    /// `aᵀ · self` for a column expression (`cols == 1`).
    pub fn dot(&self, a: &DVector<f64>) -> AffineExpr {
        assert!(self.cols == 1 && self.rows == a.len(), "MatExpr::dot expects a column");
        AffineExpr::combination((0..self.rows).map(|i| (a[i], self.get(i, 0))))
    }

    /// `tr(C · self)`.
    pub fn trace_with(&self, c: &DMatrix<f64>) -> AffineExpr {
        assert!(c.nrows() == self.cols && c.ncols() == self.rows, "MatExpr::trace_with shape mismatch");
        AffineExpr::combination((0..self.rows).flat_map(|i| (0..self.cols).map(move |j| (c[(j, i)], self.get(i, j)))))
    }

    /// `[[a, b], [c, d]]`.
    pub fn block2(a: &MatExpr, b: &MatExpr, c: &MatExpr, d: &MatExpr) -> Self {
        assert!(a.rows == b.rows && c.rows == d.rows && a.cols == c.cols && b.cols == d.cols, "block2 shape mismatch");
        let (r0, c0) = a.shape();
        Self::from_fn(a.rows + c.rows, a.cols + b.cols, |i, j| match (i < r0, j < c0) {
            (true, true) => a.get(i, j).clone(),
            (true, false) => b.get(i, j - c0).clone(),
            (false, true) => c.get(i - r0, j).clone(),
            (false, false) => d.get(i - r0, j - c0).clone(),
        })
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j).eval(x))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// True if `self[i][j]` and `self[j][i]` agree within `tol` for all pairs.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (i + 1..self.cols).all(|j| self.get(i, j).approx_eq(self.get(j, i), tol)))
    }

    pub fn upper_triangle(&self) -> impl Iterator<Item = (usize, usize, &AffineExpr)> {
        (0..self.cols).flat_map(move |j| (0..=j.min(self.rows.saturating_sub(1))).map(move |i| (i, j, self.get(i, j))))
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            AffineExpr::combination([(0.5, self.get(i, j)), (0.5, self.get(j, i))])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(i: usize) -> AffineExpr {
        AffineExpr::var(i)
    }

    #[test]
    fn combination_merges_terms() {
        let e = AffineExpr::combination([(2.0, &x(3)), (1.0, &x(1)), (-2.0, &x(3))]);
        assert_eq!(e.terms(), &[(1, 1.0)]);
        assert_eq!(AffineExpr::from_terms([(2, 1.0), (0, 2.0), (2, 0.5)], 1.0).terms(), &[(0, 2.0), (2, 1.5)]);
    }

    #[test]
    fn matrix_products_match_numeric_evaluation() {
        // X is a 2x2 general variable block at indices 0..4
        let xv = MatExpr::from_fn(2, 2, |i, j| x(2 * i + j));
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let vals = [0.3, -1.2, 2.0, 0.7];
        let xnum = DMatrix::from_row_slice(2, 2, &vals);
        let e = xv.left_mul(&c).right_mul(&c.transpose());
        assert!((e.eval(&vals) - &c * &xnum * c.transpose()).norm() < 1e-14);
        let a = DVector::from_vec(vec![1.0, -2.0]);
        assert!((xv.quad_form(&a).eval(&vals) - (a.transpose() * &xnum * &a)[0]).abs() < 1e-14);
        assert!((xv.trace_with(&c).eval(&vals) - (&c * &xnum).trace()).abs() < 1e-14);
    }

    #[test]
    fn symmetry_detection() {
        let s = MatExpr::from_fn(2, 2, |i, j| x(i.min(j) + i.max(j)));
        assert!(s.is_symmetric(0.0));
        let g = MatExpr::from_fn(2, 2, |i, j| x(2 * i + j));
        assert!(!g.is_symmetric(1e-12));
        assert!(g.symmetrized().is_symmetric(1e-15));
        let order: Vec<_> = s.upper_triangle().map(|(i, j, _)| (i, j)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 1)]);
    }
}
