//! Dense row-major `f64` kernels and seeded randomness.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::RowStochastic;
use crate::error::{Error, Result};
use crate::math;

/// Row norms below this are treated as zero by [`l2_normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-300;

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, rejecting empty shapes, wrong lengths and NaN/Inf.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::BadLength { rows, cols, len: data.len() });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", (1, cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Skips validation; callers guarantee shape and finiteness.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
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

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|x| x * factor).collect())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::IndexOutOfRange { index: i, len: self.rows });
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(indices.len(), self.cols, data)
    }

    /// Gathers the submatrix at the given rows and columns.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &i in rows {
            for &j in cols {
                if i >= self.rows || j >= self.cols {
                    return Err(Error::IndexOutOfRange { index: i.max(j), len: self.rows.min(self.cols) });
                }
                data.push(self.get(i, j));
            }
        }
        Matrix::new(rows.len(), cols.len(), data)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

/// Deterministic RNG seed. Sub-streams are derived with splitmix64 so
/// independent consumers never share a generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(self.0)
    }

    pub fn derive(self, stream: u64) -> Seed {
        let mut z = self.0 ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n >= MIN_ROW_NORM) {
            return Err(Error::ZeroRow { row: i });
        }
        for x in out.row_mut(i) {
            *x /= n;
        }
    }
    Ok(out)
}

/// `out[i][j] = dot(a_i, b_j)`.
pub fn gram(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("gram", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        for j in 0..b.rows() {
            out.data[i * b.rows() + j] = dot(ai, b.row(j));
        }
    }
    Ok(out)
}

/// Ordinary product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        let orow = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in orow.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for k in 0..a.rows() {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols()..(i + 1) * b.cols()];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

/// Softmax of a single row into `out`, max-subtracted.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = math::exp(z - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax. Saturated rows may contain exact zeros where `exp`
/// underflows; every row still sums to one.
pub fn stable_row_softmax(logits: &Matrix) -> RowStochastic {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), out.row_mut(i));
    }
    RowStochastic::from_matrix_unchecked(out)
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: Seed) -> Matrix {
    let mut rng = seed.rng();
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_norms(m: &Matrix) -> Vec<f64> {
        m.row_iter().map(norm).collect()
    }

    #[test]
    fn normalize_three_four_five() {
        let m = Matrix::from_rows(&[&[3.0, 4.0], &[1.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_random_rows_are_unit() {
        let m = gaussian_matrix(5, 7, Seed(3));
        for n in row_norms(&l2_normalize_rows(&m).unwrap()) {
            assert!((n - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize_rows(&m), Err(Error::ZeroRow { row: 1 }));
    }

    #[test]
    fn matrix_rejects_nan_and_bad_length() {
        assert!(matches!(Matrix::new(1, 2, vec![1.0, f64::NAN]), Err(Error::NonFinite { index: 1 })));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(Error::BadLength { .. })));
        assert!(matches!(Matrix::new(0, 2, vec![]), Err(Error::EmptyMatrix { .. })));
    }

    #[test]
    fn gram_examples() {
        let i2 = Matrix::identity(2);
        assert_eq!(gram(&i2, &i2).unwrap(), i2);
        let a = Matrix::from_rows(&[&[1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0, 1.0]]).unwrap();
        assert_eq!(gram(&a, &b).unwrap().as_slice(), &[0.0]);
        let c = Matrix::zeros(1, 3);
        assert!(matches!(gram(&a, &c), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gram_of_unit_rows_is_bounded() {
        let a = l2_normalize_rows(&gaussian_matrix(6, 5, Seed(1))).unwrap();
        let b = l2_normalize_rows(&gaussian_matrix(4, 5, Seed(2))).unwrap();
        for &x in gram(&a, &b).unwrap().as_slice() {
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
        }
    }

    #[test]
    fn matmul_variants_agree_with_gram() {
        let a = gaussian_matrix(3, 4, Seed(5));
        let b = gaussian_matrix(6, 4, Seed(6));
        let g = gram(&a, &b).unwrap();
        let m = matmul(&a, &b.transpose()).unwrap();
        let t = matmul_tn(&a.transpose(), &b.transpose()).unwrap();
        assert!(g.max_abs_diff(&m) < 1e-12);
        assert!(g.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[&[5.0, 5.0], &[core::f64::consts::LN_2, 0.0]]).unwrap();
        let p = stable_row_softmax(&m);
        assert_eq!(p.as_matrix().row(0), &[0.5, 0.5]);
        assert!((p.as_matrix().get(1, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_matrix().get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        // exp(-1000) is ~5e-435, far below the smallest subnormal, so the
        // exact double-precision answer is [1, 0].
        let m = Matrix::from_rows(&[&[1000.0, 0.0]]).unwrap();
        let p = stable_row_softmax(&m);
        assert_eq!(p.as_matrix().row(0), &[1.0, 0.0]);
        // One step less saturated the tail stays representable: e^-700.
        let m = Matrix::from_rows(&[&[700.0, 0.0]]).unwrap();
        let p = stable_row_softmax(&m);
        let tail = p.as_matrix().get(0, 1);
        assert!((tail / 9.85967654375977e-305 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_is_deterministic_and_seed_sensitive() {
        assert_eq!(gaussian_matrix(2, 2, Seed(7)), gaussian_matrix(2, 2, Seed(7)));
        assert_ne!(gaussian_matrix(1, 1, Seed(0)), gaussian_matrix(1, 1, Seed(1)));
    }

    #[test]
    fn gaussian_moments() {
        let m = gaussian_matrix(1000, 10, Seed(1));
        let n = m.as_slice().len() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        assert!((-0.1..=0.1).contains(&mean), "mean {mean}");
        assert!((0.9..=1.1).contains(&var), "var {var}");
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(Seed(1).derive(0), Seed(1).derive(1));
        assert_eq!(Seed(1).derive(9), Seed(1).derive(9));
    }

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f64..50.0, r * c).prop_map(move |d| Matrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(m in small_matrix(), shift in -100.0f64..100.0) {
            let shifted = Matrix::new(m.rows(), m.cols(), m.as_slice().iter().map(|x| x + shift).collect()).unwrap();
            let a = stable_row_softmax(&m);
            let b = stable_row_softmax(&shifted);
            prop_assert!(a.as_matrix().max_abs_diff(b.as_matrix()) < 1e-12);
            for row in a.as_matrix().row_iter() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn gram_transpose_symmetry(a in small_matrix(), seed in any::<u64>()) {
            let b = gaussian_matrix(3, a.cols(), Seed(seed));
            let ab = gram(&a, &b).unwrap();
            let ba = gram(&b, &a).unwrap();
            prop_assert!(ab.max_abs_diff(&ba.transpose()) < 1e-12);
        }

        #[test]
        fn normalize_idempotent(seed in any::<u64>(), r in 1usize..8, c in 1usize..8) {
            let m = gaussian_matrix(r, c, Seed(seed));
            let once = l2_normalize_rows(&m).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-12);
        }
    }
}
