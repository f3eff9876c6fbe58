//! Dense matrix kernels, matrix norms, power iteration and the RBF
//! Gaussian-process path sampler.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::invalid(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        matvec_into(&self.data, self.rows, self.cols, x, &mut out);
        out
    }

    /// `selfᵀ · y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        matvec_t_into(&self.data, self.rows, self.cols, y, &mut out);
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::invalid("shape mismatch in matrix sum"));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `out = m · x` for a row-major `rows × cols` slice.
#[inline]
pub fn matvec_into(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&m[i * cols..(i + 1) * cols], x);
    }
}

/// `out = mᵀ · y` for a row-major `rows × cols` slice.
#[inline]
pub fn matvec_t_into(m: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    out[..cols].fill(0.0);
    for i in 0..rows {
        let yi = y[i];
        if yi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *o += a * yi;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[inline]
pub fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Largest absolute entry of a slice; 0 for an empty slice.
#[inline]
pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn nonempty(m: &Matrix) -> Result<()> {
    if m.is_empty() {
        Err(Error::invalid("empty matrix"))
    } else {
        Ok(())
    }
}

/// Entrywise `(1,1)`-norm: sum of absolute values.
pub fn norm_11(m: &Matrix) -> Result<f64> {
    nonempty(m)?;
    Ok(norm1(m.as_slice()))
}

/// Entrywise maximum norm.
pub fn norm_max(m: &Matrix) -> Result<f64> {
    nonempty(m)?;
    Ok(max_abs(m.as_slice()))
}

/// `(2,1)`-norm: the ℓ1-norm of the ℓ2-norms of the columns.
pub fn norm_21(m: &Matrix) -> Result<f64> {
    nonempty(m)?;
    Ok((0..m.cols())
        .map(|j| (0..m.rows()).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt())
        .sum())
}

pub const SPECTRAL_TOL: f64 = 1e-9;
pub const SPECTRAL_MAX_ITERS: usize = 1000;
const RESTART_SEED: u64 = 0x5eed_5bec;
const ROUNDOFF: f64 = 1e-15;

/// Largest singular value via power iteration on `mᵀm`.
///
/// Starts from the first canonical basis vector. When that vector falls into
/// the null space, or once the iteration has settled, a second run from a
/// seeded random start is made and the larger estimate is kept, so that a
/// start vector orthogonal to the top singular direction cannot go unnoticed.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iters: usize) -> Result<f64> {
    nonempty(m)?;
    if max_abs(m.as_slice()) == 0.0 {
        return Ok(0.0);
    }
    let mut start = vec![0.0; m.cols()];
    start[0] = 1.0;
    let first = power_iterate(m, start, tol, max_iters)?;

    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let random_start: Vec<f64> = (0..m.cols()).map(|_| rng.sample(StandardNormal)).collect();
    let second = power_iterate(m, random_start, tol, max_iters)?;
    Ok(first.unwrap_or(0.0).max(second.unwrap_or(0.0)))
}

/// [`spectral_norm`] with the default tolerance and iteration cap. When the
/// iteration hits the cap (nearly equal leading singular values), the value
/// comes from a dense SVD instead.
pub fn spectral_norm_default(m: &Matrix) -> Result<f64> {
    match spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITERS) {
        Err(Error::ConvergenceFailure { .. }) => Ok(DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
            .singular_values()
            .max()),
        other => other,
    }
}

/// Returns `Ok(None)` if the start vector is annihilated by `mᵀm`.
fn power_iterate(m: &Matrix, mut v: Vec<f64>, tol: f64, max_iters: usize) -> Result<Option<f64>> {
    let n = norm2(&v);
    if n == 0.0 {
        return Ok(None);
    }
    v.iter_mut().for_each(|x| *x /= n);
    let mut u = vec![0.0; m.rows()];
    let mut w = vec![0.0; m.cols()];
    let mut prev = f64::NAN;
    let mut prev_step = f64::NAN;
    for _ in 0..max_iters {
        matvec_into(m.as_slice(), m.rows(), m.cols(), &v, &mut u);
        let lambda = dot(&u, &u);
        matvec_t_into(m.as_slice(), m.rows(), m.cols(), &u, &mut w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return Ok(None);
        }
        // The estimate increases geometrically; bound the remaining tail by
        // the observed contraction rate.
        let step = (lambda - prev).abs();
        let rate = step / prev_step;
        let tail = if rate < 1.0 { step * rate / (1.0 - rate) } else { f64::INFINITY };
        if step <= ROUNDOFF * lambda || (step <= tol * lambda && tail <= tol * lambda) {
            return Ok(Some(lambda.sqrt()));
        }
        prev = lambda;
        prev_step = step;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iters,
        last_estimate: prev.sqrt(),
    })
}

/// Parameters of a zero-mean RBF Gaussian-process path sampled at `k/L`,
/// `k = 1..=L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPathSpec {
    pub knot_count: usize,
    pub bandwidth: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl GpPathSpec {
    pub const DEFAULT_JITTER: f64 = 1e-8;

    pub fn new(knot_count: usize, bandwidth: f64, seed: u64) -> Self {
        Self {
            knot_count,
            bandwidth,
            jitter: Self::DEFAULT_JITTER,
            seed,
        }
    }
}

const MAX_JITTER: f64 = 1e-4;

/// RBF kernel `exp(−(s−t)²/(2ℓ²))`.
#[inline]
pub fn rbf_kernel(s: f64, t: f64, bandwidth: f64) -> f64 {
    (-(s - t).powi(2) / (2.0 * bandwidth * bandwidth)).exp()
}

/// Cholesky factor of the jittered RBF Gram matrix on the knots `k/L`.
///
/// Factor once, then draw as many independent paths as needed.
#[derive(Debug, Clone)]
pub struct GpSampler {
    n: usize,
    /// Lower-triangular factor, row-major.
    chol: Vec<f64>,
    jitter: f64,
}

impl GpSampler {
    pub fn new(knot_count: usize, bandwidth: f64, jitter: f64) -> Result<Self> {
        if knot_count == 0 {
            return Err(Error::invalid("knot_count must be at least 1"));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::invalid("bandwidth must be positive"));
        }
        if !(jitter > 0.0) {
            return Err(Error::invalid("jitter must be positive"));
        }
        let n = knot_count;
        let knots: Vec<f64> = (1..=n).map(|k| k as f64 / n as f64).collect();
        let gram = DMatrix::from_fn(n, n, |a, b| rbf_kernel(knots[a], knots[b], bandwidth));

        let mut jitter = jitter;
        loop {
            let mut k = gram.clone();
            for i in 0..n {
                k[(i, i)] += jitter;
            }
            if let Some(c) = k.cholesky() {
                let l = c.l();
                let mut chol = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        chol[i * n + j] = l[(i, j)];
                    }
                }
                return Ok(Self { n, chol, jitter });
            }
            jitter *= 10.0;
            if jitter > MAX_JITTER * (1.0 + 1e-12) {
                return Err(Error::NumericalFailure(format!(
                    "RBF Gram matrix on {n} knots not positive definite up to jitter {MAX_JITTER}"
                )));
            }
        }
    }

    pub fn from_spec(spec: &GpPathSpec) -> Result<Self> {
        Self::new(spec.knot_count, spec.bandwidth, spec.jitter)
    }

    pub fn knot_count(&self) -> usize {
        self.n
    }

    /// Diagonal jitter that made the Gram matrix factorizable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.n;
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        (0..n)
            .map(|i| dot(&self.chol[i * n..i * n + i + 1], &z[..=i]))
            .collect()
    }
}

/// One GP path at the knots `k/L`, deterministic in `spec.seed`.
pub fn sample_gp_path(spec: &GpPathSpec) -> Result<Vec<f64>> {
    let sampler = GpSampler::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(sampler.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn entrywise_norms() {
        let a = m(&[&[1.0, -2.0], &[3.0, 0.0]]);
        assert_eq!(norm_11(&a).unwrap(), 6.0);
        assert_eq!(norm_max(&a).unwrap(), 3.0);
        assert_eq!(norm_11(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        assert_eq!(norm_max(&Matrix::zeros(3, 3)).unwrap(), 0.0);
        assert_eq!(norm_11(&Matrix::identity(5)).unwrap(), 5.0);
        assert_eq!(norm_max(&Matrix::identity(5)).unwrap(), 1.0);
    }

    #[test]
    fn column_norm_sum() {
        assert_eq!(norm_21(&m(&[&[3.0, 4.0], &[0.0, 0.0]])).unwrap(), 7.0);
        assert_eq!(norm_21(&Matrix::identity(4)).unwrap(), 4.0);
        assert_eq!(norm_21(&Matrix::zeros(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn empty_matrix_rejected() {
        let e = Matrix::zeros(0, 3);
        assert!(matches!(norm_11(&e), Err(Error::InvalidArgument(_))));
        assert!(matches!(norm_max(&e), Err(Error::InvalidArgument(_))));
        assert!(matches!(norm_21(&e), Err(Error::InvalidArgument(_))));
        assert!(spectral_norm_default(&e).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn spectral_small_cases() {
        let s = spectral_norm_default(&Matrix::identity(2)).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        let s = spectral_norm_default(&Matrix::diag(&[3.0, -1.0])).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
        // e1 is annihilated here, forcing the random restart.
        let s = spectral_norm_default(&m(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        // e1 is a non-dominant singular direction.
        let s = spectral_norm_default(&Matrix::diag(&[1.0, 3.0])).unwrap();
        assert!((s - 3.0).abs() < 1e-9);
        assert_eq!(spectral_norm_default(&Matrix::zeros(3, 2)).unwrap(), 0.0);
    }

    #[test]
    fn spectral_reports_last_iterate() {
        let a = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let err = spectral_norm(&a, 1e-300, 2).unwrap_err();
        match err {
            Error::ConvergenceFailure { iterations, last_estimate } => {
                assert_eq!(iterations, 2);
                assert!(last_estimate > 0.99);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spectral_near_identity_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = Matrix::identity(4)
                .add(&Matrix::random_normal(4, 4, 1e-3, &mut rng))
                .unwrap();
            let svd = DMatrix::from_row_slice(4, 4, a.as_slice()).singular_values();
            let s = spectral_norm_default(&a).unwrap();
            assert!((s - svd.max()).abs() <= 1e-9 * svd.max());
        }
    }

    #[test]
    fn spectral_rectangular_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Matrix::random_normal(4, 7, 1.0, &mut rng);
            let svd = DMatrix::from_row_slice(4, 7, a.as_slice()).singular_values();
            let s = spectral_norm_default(&a).unwrap();
            assert!((s - svd.max()).abs() <= 1e-6 * svd.max());
        }
    }

    #[test]
    fn gp_marginals_and_correlation() {
        let sampler = GpSampler::new(100, 0.1, 1e-8).unwrap();
        // row i of the factor has squared norm K_ii + jitter
        for i in 0..100 {
            let row = &sampler.chol[i * 100..i * 100 + i + 1];
            assert!((dot(row, row) - (1.0 + sampler.jitter())).abs() < 1e-9);
        }
        let r0 = &sampler.chol[0..1];
        let r1 = &sampler.chol[100..102];
        let k01 = r0[0] * r1[0];
        // adjacent knots at spacing 0.01
        assert!((k01 - (-0.005f64).exp()).abs() < 1e-9);
        assert!((k01 - 0.995_012_479_192_682_3).abs() < 1e-9);
    }

    #[test]
    fn gp_deterministic_in_seed() {
        let spec = GpPathSpec::new(30, 0.1, 7);
        assert_eq!(sample_gp_path(&spec).unwrap(), sample_gp_path(&spec).unwrap());
        let other = GpPathSpec { seed: 8, ..spec };
        assert_ne!(sample_gp_path(&spec).unwrap(), sample_gp_path(&other).unwrap());
    }

    #[test]
    fn gp_large_grid_needs_jitter_escalation() {
        let sampler = GpSampler::new(1000, 0.1, 1e-8).unwrap();
        assert!(sampler.jitter() >= 1e-8 && sampler.jitter() <= 1e-4);
    }

    #[test]
    fn gp_rejects_bad_spec() {
        assert!(GpSampler::new(0, 0.1, 1e-8).is_err());
        assert!(GpSampler::new(5, 0.0, 1e-8).is_err());
        assert!(GpSampler::new(5, 0.1, 0.0).is_err());
    }
}
