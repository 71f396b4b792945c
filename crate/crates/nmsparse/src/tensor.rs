//! Dense row-major matrices, per-token statistics, and a deterministic RNG.
//!
//! Everything operates on 64-bit reals. A row is a token, a column is a
//! hidden channel. All functions are pure: identical inputs produce
//! bit-identical outputs regardless of thread count.

use crate::error::{Error, Result};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Dense 2-D matrix of finite 64-bit reals, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidShape { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix construction",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a per-element function. The function must return finite values.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { rows, cols, data }
    }

    /// Build from slices of equal length, one per row.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DataLength {
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Row `i` as a contiguous slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the backing storage. Callers keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Transposed copy.
    pub fn transposed(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }
}

/// Dot product with four accumulators; deterministic for a fixed slice length.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// `Y = X * W^T` for `X: l x h` and `W: o x h`, giving `Y: l x o`.
///
/// `result[i][k] = sum_j X[i][j] * W[k][j]`. Both operands are read along
/// contiguous rows.
pub fn matmul(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols != w.cols {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let mut out = Matrix::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (k, slot) in oi.iter_mut().enumerate() {
            *slot = dot(xi, w.row(k));
        }
    }
    Ok(out)
}

/// Arithmetic mean of each row.
pub fn row_mean(x: &Matrix) -> Vec<f64> {
    let inv = 1.0 / x.cols as f64;
    (0..x.rows)
        .map(|i| x.row(i).iter().sum::<f64>() * inv)
        .collect()
}

/// Population variance of each row (divide by the column count, not cols - 1).
pub fn row_var(x: &Matrix) -> Vec<f64> {
    let inv = 1.0 / x.cols as f64;
    row_mean(x)
        .into_iter()
        .enumerate()
        .map(|(i, mu)| {
            x.row(i)
                .iter()
                .map(|v| {
                    let d = v - mu;
                    d * d
                })
                .sum::<f64>()
                * inv
        })
        .collect()
}

/// Deterministic random generator. Same seed, same sequence, any platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    /// Matrix with i.i.d. uniform entries in [lo, hi).
    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| lo + (hi - lo) * self.uniform())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(x: &Matrix, w: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.rows());
        for j in 0..x.cols() {
            for i in 0..x.rows() {
                for k in 0..w.rows() {
                    let v = out.get(i, k) + x.get(i, j) * w.get(k, j);
                    out.set(i, k, v);
                }
            }
        }
        out
    }

    /// Kahan-compensated sum, used as the summation oracle.
    fn compensated_sum(values: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut c = 0.0;
        for &v in values {
            let y = v - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        s
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Matrix::new(0, 3, vec![]),
            Err(Error::InvalidShape { .. })
        ));
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0; 3]),
            Err(Error::DataLength { expected: 4, got: 3 })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::INFINITY]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_dot_product() {
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let y = matmul(&x, &w).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matmul_identity_gives_transposed_layout() {
        let eye = Matrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let w = Matrix::from_fn(3, 3, |i, j| (3 * i + j) as f64);
        let y = matmul(&eye, &w).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                assert_eq!(y.get(i, k), w.get(k, i));
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch_reports_shapes() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(2, 4);
        match matmul(&x, &w) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 4));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = Rng::new(11);
        let x = rng.normal_matrix(5, 7);
        let w = rng.normal_matrix(4, 7);
        let fast = matmul(&x, &w).unwrap();
        let slow = naive_matmul(&x, &w);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            let denom = b.abs().max(1.0);
            assert!((a - b).abs() / denom < 1e-10);
        }
    }

    #[test]
    fn matmul_oracle_over_random_small_shapes() {
        let mut rng = Rng::new(29);
        for _ in 0..50 {
            let l = 2 + rng.below(15);
            let h = 2 + rng.below(15);
            let o = 2 + rng.below(15);
            let x = rng.normal_matrix(l, h);
            let w = rng.normal_matrix(o, h);
            let fast = matmul(&x, &w).unwrap();
            let slow = naive_matmul(&x, &w);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() / b.abs().max(1.0) < 1e-10);
            }
        }
    }

    #[test]
    fn row_mean_basics() {
        let x = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(row_mean(&x), vec![2.0]);
        let sym = Matrix::new(2, 2, vec![0.0, 0.0, 4.0, -4.0]).unwrap();
        assert_eq!(row_mean(&sym), vec![0.0, 0.0]);
    }

    #[test]
    fn row_mean_matches_compensated_oracle() {
        let mut rng = Rng::new(5);
        let x = rng.normal_matrix(3, 5);
        let means = row_mean(&x);
        for i in 0..3 {
            let oracle = compensated_sum(x.row(i)) / 5.0;
            assert!((means[i] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn row_var_basics() {
        let c = Matrix::new(1, 3, vec![7.5, 7.5, 7.5]).unwrap();
        assert_eq!(row_var(&c), vec![0.0]);
        let pm = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        assert_eq!(row_var(&pm), vec![1.0]);
    }

    #[test]
    fn row_var_matches_two_pass_oracle() {
        let mut rng = Rng::new(17);
        let x = rng.normal_matrix(4, 8);
        let vars = row_var(&x);
        for i in 0..4 {
            let row = x.row(i);
            let mu = compensated_sum(row) / row.len() as f64;
            let sq: Vec<f64> = row.iter().map(|v| (v - mu) * (v - mu)).collect();
            let oracle = compensated_sum(&sq) / row.len() as f64;
            assert!((vars[i] - oracle).abs() < 1e-12);
            assert!(vars[i] >= 0.0);
        }
    }

    #[test]
    fn values_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Matrix>();
        assert_send_sync::<crate::masks::Mask>();
        assert_send_sync::<crate::toylm::ToyLM>();
        assert_send_sync::<crate::sparse_format::CompressedNM>();
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }
}
