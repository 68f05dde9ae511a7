//! Dense vector/matrix primitives, a deterministic PRNG, a matrix-free
//! conjugate-gradient solver, and finite-difference oracles.
//!
//! Everything here is desk-scale: 64-bit floats, dense storage, single
//! thread. Types are immutable after construction except [`Prng`], which is
//! single-owner by design.

use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("entry {index} is not finite ({value})")]
    NonFiniteEntry { index: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix shape {rows}x{cols} does not match {len} values")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("cg did not converge in {max_iter} iterations (relative residual {residual:.3e})")]
    NonConvergence { max_iter: usize, residual: f64 },
    #[error("non-finite value produced at iteration {iter}")]
    NonFinite { iter: usize },
    #[error("invalid categorical distribution: {0}")]
    InvalidDistribution(String),
    #[error("singular matrix: pivot {pivot:.3e} in column {col}")]
    Singular { col: usize, pivot: f64 },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

/// Fixed-length vector of finite 64-bit floats.
///
/// NaN/Inf are rejected at construction; arithmetic helpers assume matching
/// lengths and panic otherwise (programmer error, not a runtime condition).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    values: Vec<f64>,
}

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericsError> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteEntry { index, value });
            }
        }
        Ok(Self { values })
    }

    /// Wrap computed values without the finiteness check. Solver loops call
    /// this on intermediates and detect non-finite states explicitly.
    pub(crate) fn raw(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self { values: (0..len).map(f).collect() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Vector::raw(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Vector::raw(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn scaled(&self, k: f64) -> Vector {
        Vector::raw(self.values.iter().map(|v| v * k).collect())
    }

    /// `self + k * other`
    pub fn add_scaled(&self, k: f64, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        Vector::raw(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + k * b)
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Row-major dense matrix of finite 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NumericsError> {
        if values.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch { rows, cols, len: values.len() });
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteEntry { index, value });
            }
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(NumericsError::DimensionMismatch { left: c, right: row.len() });
            }
            values.extend_from_slice(row);
        }
        Self::new(r, c, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.len(), "matvec: length mismatch");
        Vector::raw(
            (0..self.rows)
                .map(|r| self.row(r).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// Solve `A x = b` by Gaussian elimination with partial pivoting.
    ///
    /// This is the dense oracle the iterative solvers are tested against; it
    /// never routes through [`cg_solve`].
    pub fn solve_dense(&self, b: &Vector) -> Result<Vector, NumericsError> {
        assert_eq!(self.rows, self.cols, "solve_dense: square matrix required");
        assert_eq!(self.rows, b.len(), "solve_dense: rhs length mismatch");
        let n = self.rows;
        let mut a = self.values.clone();
        let mut x = b.as_slice().to_vec();
        for col in 0..n {
            let (pivot_row, pivot) = (col..n)
                .map(|r| (r, a[r * n + col]))
                .max_by(|l, r| l.1.abs().total_cmp(&r.1.abs()))
                .expect("non-empty pivot range");
            if pivot.abs() < 1e-300 {
                return Err(NumericsError::Singular { col, pivot });
            }
            if pivot_row != col {
                for k in 0..n {
                    a.swap(col * n + k, pivot_row * n + k);
                }
                x.swap(col, pivot_row);
            }
            for r in col + 1..n {
                let factor = a[r * n + col] / a[col * n + col];
                if factor == 0.0 {
                    continue;
                }
                for k in col..n {
                    a[r * n + k] -= factor * a[col * n + k];
                }
                x[r] -= factor * x[col];
            }
        }
        for col in (0..n).rev() {
            let mut sum = x[col];
            for k in col + 1..n {
                sum -= a[col * n + k] * x[k];
            }
            x[col] = sum / a[col * n + col];
        }
        Ok(Vector::raw(x))
    }
}

/// Name of the generator backing [`Prng`], recorded in output metadata.
pub const PRNG_ALGORITHM: &str = "chacha8";

/// Deterministic pseudo-random stream, reproducible across runs and
/// platforms for a given seed.
///
/// Backed by the ChaCha8 stream cipher; all derived draws (floats, normals,
/// index draws) are built here from raw 64-bit words so the stream layout is
/// fixed by this crate, not by a dependency's sampling internals.
#[derive(Clone, Debug)]
pub struct Prng {
    seed: u64,
    rng: rand_chacha::ChaCha8Rng,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller (two uniform draws per call).
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    /// Uniform index in `[0, n)` by rejection sampling (no modulo bias).
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below: empty range");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    /// Draw an index from a categorical distribution.
    ///
    /// `p` must have non-negative entries summing to 1 within 1e-9.
    pub fn draw_categorical(&mut self, p: &[f64]) -> Result<usize, NumericsError> {
        if p.is_empty() {
            return Err(NumericsError::InvalidDistribution("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            if !pi.is_finite() || pi < 0.0 {
                return Err(NumericsError::InvalidDistribution(format!(
                    "entry {i} is {pi}, expected a finite non-negative probability"
                )));
            }
            sum += pi;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NumericsError::InvalidDistribution(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        let u = self.next_f64();
        let mut cumulative = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            cumulative += pi;
            if u < cumulative {
                return Ok(i);
            }
        }
        // Rounding can leave the cumulative sum a hair below u; the last
        // positive-probability bucket absorbs it.
        Ok(p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1))
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vector,
    pub iterations: usize,
    /// Final `||A x - b||_2`.
    pub residual_norm: f64,
}

/// Matrix-free conjugate gradient for symmetric positive definite operators.
///
/// Returns `x` with `||A x - b||_2 <= tol * ||b||_2`. No preconditioner;
/// damping is the caller's job.
pub fn cg_solve(
    apply_a: impl Fn(&Vector) -> Vector,
    b: &Vector,
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome, NumericsError> {
    if !(tol > 0.0) {
        return Err(NumericsError::BadTolerance(tol));
    }
    let b_norm = b.norm2();
    if b_norm == 0.0 {
        return Ok(CgOutcome { x: Vector::zeros(b.len()), iterations: 0, residual_norm: 0.0 });
    }
    let threshold = tol * b_norm;
    let mut x = Vector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for iter in 0..max_iter {
        let ap = apply_a(&p);
        if !ap.is_finite() {
            return Err(NumericsError::NonFinite { iter });
        }
        let p_ap = p.dot(&ap);
        let alpha = rr / p_ap;
        if !alpha.is_finite() {
            return Err(NumericsError::NonFinite { iter });
        }
        x = x.add_scaled(alpha, &p);
        r = r.add_scaled(-alpha, &ap);
        let rr_next = r.dot(&r);
        if !rr_next.is_finite() {
            return Err(NumericsError::NonFinite { iter });
        }
        if rr_next.sqrt() <= threshold {
            return Ok(CgOutcome { x, iterations: iter + 1, residual_norm: rr_next.sqrt() });
        }
        p = r.add_scaled(rr_next / rr, &p);
        rr = rr_next;
    }
    Err(NumericsError::NonConvergence { max_iter, residual: rr.sqrt() / b_norm })
}

/// Central-difference gradient of a scalar function, component `i` being
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad(
    f: impl Fn(&Vector) -> f64,
    x: &Vector,
    eps: f64,
) -> Result<Vector, NumericsError> {
    if !(eps > 0.0) {
        return Err(NumericsError::BadTolerance(eps));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        probe.as_mut_slice()[i] = xi + eps;
        let up = f(&probe);
        probe.as_mut_slice()[i] = xi - eps;
        let down = f(&probe);
        probe.as_mut_slice()[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { iter: i });
        }
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(Vector::raw(grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded_spd(n: usize, seed: u64) -> Matrix {
        // A^T A + I with A ~ N(0,1): well-conditioned SPD fixture.
        let mut rng = Prng::new(seed);
        let a: Vec<f64> = (0..n * n).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for k in 0..n {
                    s += a[k * n + i] * a[k * n + j] / n as f64;
                }
                m.set(i, j, s);
            }
        }
        m
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(Vector::new(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn dense_solve_matches_known_inverse() {
        let a = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let b = Vector::new(vec![5.0, 10.0]).unwrap();
        let x = a.solve_dense(&b).unwrap();
        // inverse of [[2,1],[1,3]] is [[3,-1],[-1,2]]/5
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn dense_solve_rejects_singular() {
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let b = Vector::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(a.solve_dense(&b), Err(NumericsError::Singular { .. })));
    }

    #[test]
    fn cg_identity_converges_in_one_iteration() {
        let b = Vector::new(vec![3.0, -1.0]).unwrap();
        let out = cg_solve(|v| v.clone(), &b, 1e-12, 10).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x.as_slice(), b.as_slice());
    }

    #[test]
    fn cg_diagonal_solve() {
        let b = Vector::new(vec![2.0, 8.0]).unwrap();
        let out = cg_solve(
            |v| Vector::new(vec![2.0 * v[0], 4.0 * v[1]]).unwrap(),
            &b,
            1e-12,
            10,
        )
        .unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-10);
        assert!((out.x[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn cg_matches_dense_oracle_on_seeded_spd() {
        let m = seeded_spd(8, 42);
        let mut rng = Prng::new(7);
        let b = Vector::from_fn(8, |_| rng.normal(0.0, 1.0));
        let dense = m.solve_dense(&b).unwrap();
        let out = cg_solve(|v| m.matvec(v), &b, 1e-12, 100).unwrap();
        for i in 0..8 {
            assert!((out.x[i] - dense[i]).abs() < 1e-8, "component {i}");
        }
    }

    #[test]
    fn cg_residual_norm_non_increasing() {
        let m = seeded_spd(8, 11);
        let mut rng = Prng::new(3);
        let b = Vector::from_fn(8, |_| rng.normal(0.0, 1.0));
        // Re-run CG manually, recording the residual after each iteration.
        let mut x = Vector::zeros(8);
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rr = r.dot(&r);
        let mut last = f64::INFINITY;
        for _ in 0..8 {
            let ap = m.matvec(&p);
            let alpha = rr / p.dot(&ap);
            x = x.add_scaled(alpha, &p);
            r = r.add_scaled(-alpha, &ap);
            let rr_next = r.dot(&r);
            let norm = rr_next.sqrt();
            assert!(norm <= last * (1.0 + 1e-12), "residual rose: {norm} > {last}");
            last = norm;
            p = r.add_scaled(rr_next / rr, &p);
            rr = rr_next;
        }
    }

    #[test]
    fn cg_reports_non_convergence() {
        let m = seeded_spd(8, 5);
        let b = Vector::from_fn(8, |i| (i + 1) as f64);
        let err = cg_solve(|v| m.matvec(v), &b, 1e-14, 1).unwrap_err();
        assert!(matches!(err, NumericsError::NonConvergence { .. }));
    }

    #[test]
    fn cg_detects_non_finite_operator() {
        let b = Vector::new(vec![1.0, 1.0]).unwrap();
        let err = cg_solve(|_| Vector::raw(vec![f64::NAN, 0.0]), &b, 1e-8, 10).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn finite_diff_on_squared_norm() {
        let x = Vector::new(vec![1.0, 2.0]).unwrap();
        let grad = finite_diff_grad(|v| v.dot(v), &x, 1e-5).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-6);
        assert!((grad[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let x = Vector::new(vec![0.3, -0.7, 2.0]).unwrap();
        let grad = finite_diff_grad(|_| 4.5, &x, 1e-5).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn finite_diff_flags_non_finite_objective() {
        let x = Vector::new(vec![0.0]).unwrap();
        let err = finite_diff_grad(|v| v[0].ln(), &x, 1e-5).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }

    #[test]
    fn prng_equal_seeds_equal_streams() {
        let mut a = Prng::new(123);
        let mut b = Prng::new(123);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Prng::new(124);
        assert_ne!(Prng::new(123).next_u64(), c.next_u64());
    }

    #[test]
    fn categorical_degenerate_always_first() {
        let mut rng = Prng::new(0);
        for _ in 0..100 {
            assert_eq!(rng.draw_categorical(&[1.0, 0.0, 0.0]).unwrap(), 0);
        }
    }

    #[test]
    fn categorical_two_way_frequencies() {
        let mut rng = Prng::new(2024);
        let n = 100_000;
        let mut count0 = 0usize;
        for _ in 0..n {
            if rng.draw_categorical(&[0.5, 0.5]).unwrap() == 0 {
                count0 += 1;
            }
        }
        let freq = count0 as f64 / n as f64;
        assert!((0.49..=0.51).contains(&freq), "freq = {freq}");
    }

    #[test]
    fn categorical_three_way_frequencies() {
        let p = [0.2, 0.3, 0.5];
        let mut rng = Prng::new(99);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[rng.draw_categorical(&p).unwrap()] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - p[i]).abs() <= 0.01, "index {i}: freq {freq} vs p {}", p[i]);
        }
    }

    #[test]
    fn categorical_rejects_bad_distributions() {
        let mut rng = Prng::new(1);
        assert!(rng.draw_categorical(&[]).is_err());
        assert!(rng.draw_categorical(&[0.5, -0.5, 1.0]).is_err());
        assert!(rng.draw_categorical(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn next_below_covers_range_uniformly() {
        let mut rng = Prng::new(8);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[rng.next_below(5)] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 50_000.0;
            assert!((freq - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = Prng::new(31);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.normal(1.0, 2.0)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.05);
        assert!((var - 4.0).abs() < 0.1);
    }
}
