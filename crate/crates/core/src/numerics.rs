//! Dense linear algebra, probability and optimization primitives.
//!
//! Everything here is a pure function of its inputs. Vectors and matrices
//! refuse non-finite entries at construction, so downstream code can assume
//! finiteness without re-checking.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// A finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("vector must have at least one entry"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "vector entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Vector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Unit-norm copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::domain("cannot normalize a zero-norm vector"));
        }
        Ok(Vector(self.0.iter().map(|v| v / n).collect()))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        ensure_dim("matrix data length", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ensure_dim("matrix row length", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Matrix::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from N(0, scale^2).
    pub fn random_normal(rows: usize, cols: usize, scale: f64, rng: &mut SeededRng) -> Self {
        Matrix::from_fn(rows, cols, |_, _| scale * rng.normal())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        Matrix::from_fn(self.rows, other.rows, |r, c| dot(self.row(r), other.row(c)))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (r, &a) in self.row(k).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, b, &mut out.data[r * other.cols..(r + 1) * other.cols]);
                }
            }
        }
        out
    }

    /// In-place `self += alpha · other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        axpy(alpha, &other.data, &mut self.data);
    }

    /// In-place rank-one update `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                let cols = self.cols;
                axpy(alpha * ur, v, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean of the rows as a vector of length `cols`.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            axpy(1.0, self.row(r), &mut out);
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += alpha · x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Unit-norm copy of a slice, or a domain error for the zero vector.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::domain("cannot normalize a zero-norm vector"));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Cosine of the angle between `a` and `b`; zero-norm inputs are an error.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    ensure_dim("cosine_similarity", a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine similarity of a zero-norm vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Max-shifted softmax.
pub fn softmax_weights(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::domain("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::domain("softmax scores must be finite"));
    }
    Ok(softmax_unchecked(scores))
}

pub(crate) fn softmax_unchecked(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Log density of `x` under N(mean, sigma² I).
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    ensure_dim("gaussian_log_density", mean.len(), x.len())?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let d = x.len() as f64;
    let var = sigma * sigma;
    Ok(
        -0.5 * d * (2.0 * std::f64::consts::PI * var).ln()
            - squared_distance(x, mean) / (2.0 * var),
    )
}

/// Attention weights and output of `softmax(Q Kᵀ / √d_k) V`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub weights: Matrix,
    pub output: Matrix,
}

pub fn scaled_dot_attention(queries: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    Ok(scaled_dot_attention_with_weights(queries, keys, values)?.output)
}

pub fn scaled_dot_attention_with_weights(
    queries: &Matrix,
    keys: &Matrix,
    values: &Matrix,
) -> Result<AttentionOutput> {
    ensure_dim("attention query/key width", keys.cols(), queries.cols())?;
    ensure_dim("attention key/value rows", keys.rows(), values.rows())?;
    let scale = 1.0 / (keys.cols() as f64).sqrt();
    let mut weights = queries.matmul_t(keys);
    for r in 0..weights.rows() {
        let row = weights.row_mut(r);
        row.iter_mut().for_each(|v| *v *= scale);
        let sm = softmax_unchecked(row);
        row.copy_from_slice(&sm);
    }
    let output = weights.matmul(values);
    Ok(AttentionOutput { weights, output })
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_difference_gradient<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::domain(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut x = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::domain(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::domain(format!(
                "non-finite difference quotient at coordinate {i}"
            )));
        }
        grad.push(g);
    }
    Ok(grad)
}

/// `params − lr · grad`.
pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    ensure_dim("sgd_step", params.len(), grad.len())?;
    if !(lr >= 0.0) {
        return Err(Error::domain(format!(
            "learning rate must be non-negative, got {lr}"
        )));
    }
    Ok(params.iter().zip(grad).map(|(p, g)| p - lr * g).collect())
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub parameter_count: usize,
    pub per_parameter_errors: Vec<f64>,
}

impl GradientCheckReport {
    /// Relative error `|a − n| / max(|a|, |n|, floor)` per coordinate.
    pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> Result<Self> {
        ensure_dim("gradient check", analytic.len(), numeric.len())?;
        let per_parameter_errors: Vec<f64> = analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .collect();
        let max_relative_error = per_parameter_errors.iter().copied().fold(0.0, f64::max);
        Ok(GradientCheckReport {
            max_relative_error,
            parameter_count: analytic.len(),
            per_parameter_errors,
        })
    }
}

/// Runs `f` at `p`, differentiates numerically and compares with `analytic`.
pub fn check_gradient<F>(
    f: F,
    p: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> Result<GradientCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let numeric = finite_difference_gradient(f, p, h)?;
    GradientCheckReport::compare(analytic, &numeric, floor)
}

/// The one PRNG type used across the crate. Cheap to fork into independent
/// streams, so parallel work never shares mutable random state.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on this rng's seed and `stream`.
    pub fn fork(&self, stream: u64) -> SeededRng {
        SeededRng::new(mix_seed(self.seed, stream))
    }

    /// Child stream keyed by a label, for readability at call sites.
    pub fn fork_named(&self, label: &str) -> SeededRng {
        self.fork(fnv1a64(label.as_bytes()))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal_vec(&mut self, dim: usize, scale: f64) -> Vec<f64> {
        (0..dim).map(|_| scale * self.normal()).collect()
    }

    /// `k` distinct indices from `0..n` in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer over a seed/stream pair.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2PI: f64 = 1.837_877_066_409_345_3;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((c - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_and_mismatch() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_weights(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let w = softmax_weights(&[2f64.ln(), 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(softmax_weights(&[5.0]).unwrap(), vec![1.0]);
        assert!(softmax_weights(&[]).is_err());
    }

    #[test]
    fn softmax_survives_huge_scores() {
        let w = softmax_weights(&[1000.0, 999.0]).unwrap();
        assert!(w.iter().all(|v| v.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_examples() {
        let v = gaussian_log_density(&[0.3], &[0.3], 1.0).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-12);
        let v = gaussian_log_density(&[1.0], &[0.0], 1.0).unwrap();
        assert!((v - (-0.5 * LN_2PI - 0.5)).abs() < 1e-12);
        let m = [0.1, -0.2, 0.3, 0.4];
        let v = gaussian_log_density(&m, &m, 0.1).unwrap();
        let expected = -2.0 * (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 5.534586).abs() < 1e-6);
        assert!(gaussian_log_density(&[0.0], &[0.0], 0.0).is_err());
        assert!(gaussian_log_density(&[0.0], &[0.0], -1.0).is_err());
    }

    #[test]
    fn attention_singleton_returns_value() {
        let q = Matrix::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let k = Matrix::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let v = Matrix::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.row(0), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn attention_equidistant_keys_average_values() {
        let q = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((out.get(0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn attention_dimension_errors() {
        let q = Matrix::zeros(1, 2);
        let k = Matrix::zeros(2, 3);
        let v = Matrix::zeros(2, 1);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
        let k = Matrix::zeros(2, 2);
        let v = Matrix::zeros(3, 1);
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|p| Ok(p[0] * p[0] + p[1] * p[1]), &[1.0, 2.0], 1e-5)
            .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| Ok(3.0), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = finite_difference_gradient(|p| Ok(p[0] * p[1]), &[3.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-6 && (g[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_propagates_non_finite() {
        let r = finite_difference_gradient(|p| Ok(1.0 / p[0]), &[0.0], 1e-300);
        assert!(r.is_err());
        let r = finite_difference_gradient(|_| Err(Error::domain("boom")), &[0.0], 1e-3);
        assert!(r.is_err());
    }

    #[test]
    fn sgd_examples() {
        assert_eq!(
            sgd_step(&[1.0, 1.0], &[1.0, 0.0], 0.5).unwrap(),
            vec![0.5, 1.0]
        );
        assert_eq!(
            sgd_step(&[1.0, 2.0], &[0.0, 0.0], 0.1).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(sgd_step(&[0.0], &[2.0], 1e-5).unwrap(), vec![-2e-5]);
        assert!(sgd_step(&[0.0], &[1.0, 2.0], 0.1).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matrix_products_agree() {
        let mut rng = SeededRng::new(3);
        let a = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let b = Matrix::random_normal(4, 2, 1.0, &mut rng);
        let ab = a.matmul(&b);
        let ab2 = a.matmul_t(&b.transpose());
        let ab3 = a.transpose().t_matmul(&b);
        for (x, (y, z)) in ab
            .as_slice()
            .iter()
            .zip(ab2.as_slice().iter().zip(ab3.as_slice()))
        {
            assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
        }
        let x = [0.5, -1.0, 2.0, 0.25];
        let y = a.matvec(&x);
        let yt = a.transpose().matvec_t(&x);
        for (p, q) in y.iter().zip(&yt) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn forks_are_deterministic_and_distinct() {
        let root = SeededRng::new(11);
        let mut a = root.fork(1);
        let mut b = root.fork(1);
        let mut c = root.fork(2);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }
}
