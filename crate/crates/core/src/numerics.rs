//! Dense linear algebra and the splittable random stream shared by every
//! other module. Vectors are plain `Vec<f64>` / `&[f64]`; matrices are
//! row-major [`Matrix`] values.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{check_dim, Error, Result};

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
        check_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero; an empty-column matrix has no rows worth iterating
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok(self.row_iter().map(|row| dot(row, x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.row_iter().zip(y) {
            axpy(yr, row, &mut out);
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a != 0.0 {
                    axpy(a, other.row(k), out.row_mut(r));
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.rows, other.rows)?;
        check_dim(self.cols, other.cols)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && (0..self.rows).all(|r| (0..r).all(|c| (self[(r, c)] - self[(c, r)]).abs() <= tol))
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = a`.
///
/// Fails with [`Error::NotPositiveDefinite`] as soon as a pivot is not
/// strictly positive.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::DimensionMismatch {
            expected: a.rows,
            got: a.cols,
        });
    }
    if !a.is_symmetric(1e-12 * a.max_abs().max(1.0)) {
        return Err(Error::PreconditionViolated("cholesky input is not symmetric".into()));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > 0.0) {
            return Err(Error::NotPositiveDefinite { row: j, pivot });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L·y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    check_dim(l.rows, b.len())?;
    let mut y = b.to_vec();
    for i in 0..l.rows {
        let s = dot(&l.row(i)[..i], &y[..i]);
        y[i] = (y[i] - s) / l[(i, i)];
    }
    Ok(y)
}

/// Solves `Lᵀ·x = y` for lower-triangular `L`.
pub fn backward_substitute(l: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    check_dim(l.rows, y.len())?;
    let n = l.rows;
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Solves `A·x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    backward_substitute(l, &forward_substitute(l, b)?)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[c] = 1.0;
        let col = cholesky_solve(&l, &e)?;
        for r in 0..n {
            inv[(r, c)] = col[r];
        }
    }
    // symmetrize away rounding
    for r in 0..n {
        for c in 0..r {
            let v = 0.5 * (inv[(r, c)] + inv[(c, r)]);
            inv[(r, c)] = v;
            inv[(c, r)] = v;
        }
    }
    Ok(inv)
}

/// `log det A` from its Cholesky factor.
pub fn cholesky_logdet(l: &Matrix) -> f64 {
    2.0 * (0..l.rows).map(|i| l[(i, i)].ln()).sum::<f64>()
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream (ChaCha8) addressed by `(key, stream)`.
///
/// [`Rng::split`] derives a child stream from the parent's address without
/// consuming parent state, so a worker handed `rng.split(i)` sees the same
/// numbers no matter how work is scheduled.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    fn at(key: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(key);
        inner.set_stream(stream);
        Self {
            key,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.key
    }

    /// Independent deterministic substream number `k`.
    pub fn split(&self, k: u64) -> Rng {
        let child_key = splitmix64(self.key ^ splitmix64(self.stream).rotate_left(23));
        Rng::at(child_key, k)
    }

    /// Substream addressed by a path of indices, e.g. `[case, n, rep]`.
    pub fn split_path(&self, path: &[u64]) -> Rng {
        path.iter().fold(self.clone(), |r, &k| r.split(k))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform index in `0..n` (multiply-shift; bias below 2⁻⁶⁴·n).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw via the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = self.normal());
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` i.i.d. standard normal draws.
pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v);
    v
}

/// Column means and unbiased covariance of the rows of `samples`.
pub fn sample_moments(samples: &Matrix) -> (Vec<f64>, Matrix) {
    let n = samples.rows();
    let d = samples.cols();
    let mut mean = vec![0.0; d];
    for row in samples.row_iter() {
        axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in samples.row_iter() {
        for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x - m;
        }
        for r in 0..d {
            for c in 0..=r {
                cov[(r, c)] += centered[r] * centered[c];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for r in 0..d {
        for c in 0..=r {
            let v = cov[(r, c)] / denom;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    (mean, cov)
}

/// Mean and standard error of a set of scalar observations.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}\n{a:?}\n{b:?}");
        }
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(l, Matrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert_close(&l, &expected, 1e-15);
        let rebuilt = l.matmul(&l.transpose()).unwrap();
        let rel = rebuilt.add(&a.scaled(-1.0)).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { row: 1, .. })));
    }

    #[test]
    fn normals_are_deterministic() {
        let a = standard_normal(&mut Rng::new(17), 5);
        let b = standard_normal(&mut Rng::new(17), 5);
        assert_eq!(a, b);
        let c = standard_normal(&mut Rng::new(18), 5);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        let z = standard_normal(&mut Rng::new(3), 100_000);
        let (mean, _) = mean_and_stderr(&z);
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn split_streams_differ_and_repeat() {
        let root = Rng::new(5);
        let a: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(root.split(1), |r, _| Some(r.next_u64()))
            .collect();
        let b: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(root.split(1), |r, _| Some(r.next_u64()))
            .collect();
        let c: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(root.split(2), |r, _| Some(r.next_u64()))
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // grandchildren of different children do not collide
        let g1 = root.split(1).split(0).next_u64();
        let g2 = root.split(2).split(0).next_u64();
        assert_ne!(g1, g2);
    }

    #[test]
    fn split_streams_are_uncorrelated() {
        let root = Rng::new(11);
        let mut a = root.split(0);
        let mut b = root.split(1);
        let n = 50_000;
        let corr: f64 = (0..n).map(|_| a.normal() * b.normal()).sum::<f64>() / n as f64;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]]).unwrap();
        let inv = spd_inverse(&a).unwrap();
        assert_close(&a.matmul(&inv).unwrap(), &Matrix::identity(3), 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn lower_factor(n: usize, vals: &[f64]) -> Matrix {
            let mut l = Matrix::zeros(n, n);
            let mut k = 0;
            for r in 0..n {
                for c in 0..=r {
                    l[(r, c)] = if r == c { 1.0 + vals[k].abs() } else { 0.5 * vals[k] };
                    k += 1;
                }
            }
            l
        }

        proptest! {
            #[test]
            fn cholesky_recovers_factor(n in 1usize..8, vals in prop::collection::vec(-1.0f64..1.0, 36)) {
                let l = lower_factor(n, &vals);
                let a = l.matmul(&l.transpose()).unwrap();
                let back = cholesky(&a).unwrap();
                for (x, y) in back.as_slice().iter().zip(l.as_slice()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn cholesky_solve_residual(n in 1usize..8, vals in prop::collection::vec(-1.0f64..1.0, 36),
                                       b in prop::collection::vec(-10.0f64..10.0, 8)) {
                let l = lower_factor(n, &vals);
                let a = l.matmul(&l.transpose()).unwrap();
                let rhs = &b[..n];
                let x = cholesky_solve(&cholesky(&a).unwrap(), rhs).unwrap();
                let ax = a.matvec(&x).unwrap();
                let bmax = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                let res = ax.iter().zip(rhs).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
                prop_assert!(res <= 1e-8 * bmax);
            }
        }
    }
}
