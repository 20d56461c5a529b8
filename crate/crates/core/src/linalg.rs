//! Dense row-major linear algebra in 64-bit floats.
//!
//! Everything else in the crate is built on these primitives. Accumulation
//! order is fixed (row-major, left to right over the shared dimension) so
//! results are bit-reproducible across runs.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return shape_err(format!("row {i} has {} entries, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: n,
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vector {
        Vector::from((0..self.rows).map(|r| self[(r, c)]).collect::<Vec<_>>())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Standard product `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        matmul(self, rhs)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return shape_err(format!(
                "matvec: {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                v.len()
            ));
        }
        Ok(Vector::from(
            (0..self.rows)
                .map(|r| dot(self.row(r), v))
                .collect::<Vec<_>>(),
        ))
    }

    /// `vᵀ · self` for a row vector `v`, i.e. `selfᵀ · v`.
    pub fn vecmat(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.rows {
            return shape_err(format!(
                "vecmat: vector of length {} with {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &w) in v.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += w * x;
            }
        }
        Ok(Vector::from(out))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: f64, other: &Matrix) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| s * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Owned dense vector.
#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector{:?}", self.0)
    }
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// View as a `1×n` matrix.
    pub fn to_row(&self) -> Matrix {
        Matrix::from_vec(1, self.len(), self.0.clone()).expect("row view")
    }

    /// View as an `n×1` matrix.
    pub fn to_column(&self) -> Matrix {
        Matrix::from_vec(self.len(), 1, self.0.clone()).expect("column view")
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Matrix product with the shared dimension accumulated left to right.
pub fn matmul(lhs: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if lhs.cols != rhs.rows {
        return shape_err(format!(
            "matmul: {}x{} times {}x{}",
            lhs.rows, lhs.cols, rhs.rows, rhs.cols
        ));
    }
    let mut out = Matrix::zeros(lhs.rows, rhs.cols);
    for i in 0..lhs.rows {
        let lrow = lhs.row(i);
        let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
        for (j, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &l) in lrow.iter().enumerate() {
                acc += l * rhs.data[k * rhs.cols + j];
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// `u ⊗ v`, the `m×n` matrix with entries `u[i]·v[j]`.
pub fn outer(u: &[f64], v: &[f64]) -> Result<Matrix> {
    if u.is_empty() || v.is_empty() {
        return shape_err("outer product of an empty vector");
    }
    Ok(Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j]))
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return shape_err("softmax of an empty vector");
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "softmax input has non-finite entry {} at index {i}",
            v[i]
        )));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector(exps.into_iter().map(|e| e / total).collect()))
}

/// Vector-Jacobian product of softmax: given `p = softmax(z)` and `dp`,
/// returns `dz = p ⊙ (dp − ⟨p, dp⟩)`.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vector {
    let s = dot(p, dp);
    Vector(p.iter().zip(dp).map(|(pi, di)| pi * (di - s)).collect())
}

/// Indices of the `k` largest entries, ties broken towards the lower index,
/// returned in ascending order.
pub fn top_k(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::Argument(format!(
            "top_k needs 1 <= k <= n, got k={k}, n={}",
            v.len()
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps lower indices first among equal values
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Column-wise mean over the rows (sequence dimension) of `h`.
pub fn mean_pool(h: &Matrix) -> Result<Vector> {
    if h.rows == 0 {
        return shape_err("mean_pool over an empty sequence");
    }
    let mut acc = vec![0.0; h.cols];
    for r in 0..h.rows {
        for (a, x) in acc.iter_mut().zip(h.row(r)) {
            *a += x;
        }
    }
    let n = h.rows as f64;
    Ok(Vector(acc.into_iter().map(|a| a / n).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_times_m() {
        let a = m(&[&[1.5, -2.0], &[0.25, 7.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn hand_multiplied_product() {
        let out = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[0.0], &[1.0]])).unwrap();
        assert_eq!(out, m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn ones_row_times_ones_column() {
        let k = 7;
        let out = matmul(&Matrix::from_fn(1, k, |_, _| 1.0), &Matrix::from_fn(k, 1, |_, _| 1.0)).unwrap();
        assert_eq!(out, m(&[&[k as f64]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn outer_examples() {
        assert_eq!(outer(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), m(&[&[0.0, 1.0], &[0.0, 0.0]]));
        assert_eq!(
            outer(&[1.0, 2.0], &[3.0, 4.0, 5.0]).unwrap(),
            m(&[&[3.0, 4.0, 5.0], &[6.0, 8.0, 10.0]])
        );
        assert_eq!(outer(&[0.0, 0.0], &[1.0, 2.0, 3.0]).unwrap(), Matrix::zeros(2, 3));
        assert!(matches!(outer(&[], &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[2.5; 4]).unwrap();
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let p = softmax(&[1000.0, -1000.0, 999.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.7, 0.2], 1).unwrap(), vec![1]);
        assert_eq!(top_k(&[0.5, 0.5, 0.0], 2).unwrap(), vec![0, 1]);
        assert!(matches!(top_k(&[0.1, 0.2], 3), Err(Error::Argument(_))));
        assert!(matches!(top_k(&[0.1, 0.2], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn mean_pool_examples() {
        assert_eq!(mean_pool(&m(&[&[1.0, -3.0, 2.0]])).unwrap().as_slice(), &[1.0, -3.0, 2.0]);
        assert_eq!(mean_pool(&m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap().as_slice(), &[2.0, 3.0]);
        assert!(matches!(mean_pool(&Matrix::zeros(0, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn matvec_and_vecmat_agree_with_matmul() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let x = [1.0, -1.0, 2.0];
        let via_mm = matmul(&a, &Vector::from(&x[..]).to_column()).unwrap();
        assert_eq!(a.matvec(&x).unwrap().as_slice(), via_mm.as_slice());
        let y = [2.0, -3.0];
        let via_mm = matmul(&Vector::from(&y[..]).to_row(), &a).unwrap();
        assert_eq!(a.vecmat(&y).unwrap().as_slice(), via_mm.as_slice());
    }

    /// Exhaustive oracle: rank every index by counting how many entries
    /// beat it under (value desc, index asc).
    fn top_k_oracle(v: &[f64], k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..v.len())
            .filter(|&i| {
                let better = (0..v.len())
                    .filter(|&j| v[j] > v[i] || (v[j] == v[i] && j < i))
                    .count();
                better < k
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn outer_equals_column_times_row(u in proptest::collection::vec(-5.0f64..5.0, 1..6),
                                         v in proptest::collection::vec(-5.0f64..5.0, 1..6)) {
            let o = outer(&u, &v).unwrap();
            let mm = matmul(&Vector::from(u).to_column(), &Vector::from(v).to_row()).unwrap();
            prop_assert_eq!(o, mm);
        }

        #[test]
        fn softmax_normalized_and_shift_invariant(v in proptest::collection::vec(-30.0f64..30.0, 1..10),
                                                   c in -50.0f64..50.0) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn top_k_matches_exhaustive_oracle(v in proptest::collection::vec(-3i32..3, 1..=8), kf in 0.0f64..1.0) {
            // small integer values force plenty of ties
            let v: Vec<f64> = v.into_iter().map(f64::from).collect();
            let k = 1 + ((v.len() - 1) as f64 * kf) as usize;
            prop_assert_eq!(top_k(&v, k).unwrap(), top_k_oracle(&v, k));
        }

        #[test]
        fn top_k_shift_invariant(v in proptest::collection::vec(-1.0f64..1.0, 2..8), c in -4.0f64..4.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            // exact ties may be broken by rounding after the shift, so only compare when gaps are clear
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-9));
            prop_assert_eq!(top_k(&v, 2).unwrap(), top_k(&shifted, 2).unwrap());
        }

        #[test]
        fn mean_pool_permutation_invariant(h in small_matrix(4, 3), perm in Just([2usize, 0, 3, 1])) {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| h.row(i).to_vec()).collect();
            let p = Matrix::from_rows(&rows).unwrap();
            let a = mean_pool(&h).unwrap();
            let b = mean_pool(&p).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
