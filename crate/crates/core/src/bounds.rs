//! Variational bound machinery: Gaussian KL terms, the per-layer
//! upper-bound aggregate over selected layer sets, the predictive lower
//! bound, and exact discrete mutual-information oracles used by tests.
//!
//! Variational families are isotropic Gaussians with configured standard
//! deviations, so every bound term is closed form — no Monte Carlo noise
//! inside the unlearning loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Batch, ModelError, ModelSpec, ParamVector};
use crate::numerics::{Matrix, NumericsError, Prng, Vector};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("standard deviation must be positive, got {0}")]
    BadStd(f64),
    #[error("invalid joint pmf: {0}")]
    InvalidJoint(String),
    #[error("invalid layer index sets: {0}")]
    InvalidIndexSets(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Isotropic diagonal Gaussian: a mean vector with one shared std.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vector,
    pub std: f64,
}

impl GaussianDiag {
    pub fn new(mean: Vector, std: f64) -> Result<Self, BoundsError> {
        if !(std > 0.0) {
            return Err(BoundsError::BadStd(std));
        }
        Ok(Self { mean, std })
    }
}

/// Closed-form KL divergence between isotropic diagonal Gaussians:
/// per component `ln(σq/σp) + (σp² + (μp-μq)²)/(2σq²) - 1/2`, summed.
pub fn kl_gaussian_diag(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64, BoundsError> {
    if p.mean.len() != q.mean.len() {
        return Err(BoundsError::DimensionMismatch { left: p.mean.len(), right: q.mean.len() });
    }
    let log_ratio = (q.std / p.std).ln();
    let var_p = p.std * p.std;
    let two_var_q = 2.0 * q.std * q.std;
    let mut total = 0.0;
    for (mp, mq) in p.mean.iter().zip(q.mean.iter()) {
        let gap = mp - mq;
        total += log_ratio + (var_p + gap * gap) / two_var_q - 0.5;
    }
    Ok(total)
}

/// Per-layer parameter term: KL between a Gaussian centered at the
/// post-update slice and one centered at the reference slice (the dynamic
/// prior — the slice value before the update).
pub fn uib_theta_term(
    theta_after: &[f64],
    theta_prior_mean: &[f64],
    sigma_p: f64,
    sigma_q: f64,
) -> Result<f64, BoundsError> {
    if theta_after.len() != theta_prior_mean.len() {
        return Err(BoundsError::DimensionMismatch {
            left: theta_after.len(),
            right: theta_prior_mean.len(),
        });
    }
    let p = GaussianDiag::new(Vector::new(theta_after.to_vec())?, sigma_p)?;
    let q = GaussianDiag::new(Vector::new(theta_prior_mean.to_vec())?, sigma_q)?;
    kl_gaussian_diag(&p, &q)
}

/// Per-layer regularizer term: KL between a Gaussian centered at the
/// realized regularizer gradient and a zero-centered reference (zero
/// regularizer pressure = no information flow).
pub fn uib_r_term(reg_grad: &[f64], sigma_p: f64, sigma_q: f64) -> Result<f64, BoundsError> {
    let p = GaussianDiag::new(Vector::new(reg_grad.to_vec())?, sigma_p)?;
    let q = GaussianDiag::new(Vector::zeros(reg_grad.len()), sigma_q)?;
    kl_gaussian_diag(&p, &q)
}

/// Check the layer index sets (1-based) selecting which per-layer terms
/// enter the upper bound: `s_theta` must be non-empty and, with
/// `l = max(s_theta)`, `s_r` must contain every layer in `[l+1, L]`.
pub fn validate_layer_sets(
    s_theta: &[usize],
    s_r: &[usize],
    num_layers: usize,
) -> Result<(), BoundsError> {
    if s_theta.is_empty() {
        return Err(BoundsError::InvalidIndexSets("s_theta must be non-empty".into()));
    }
    for (name, set) in [("s_theta", s_theta), ("s_r", s_r)] {
        for &l in set {
            if l < 1 || l > num_layers {
                return Err(BoundsError::InvalidIndexSets(format!(
                    "{name} contains layer {l}, valid layers are 1..={num_layers}"
                )));
            }
        }
    }
    let max_theta = *s_theta.iter().max().expect("non-empty");
    for l in max_theta + 1..=num_layers {
        if !s_r.contains(&l) {
            return Err(BoundsError::InvalidIndexSets(format!(
                "s_r must contain every layer in [{}, {num_layers}], missing {l}",
                max_theta + 1
            )));
        }
    }
    Ok(())
}

/// Sum of the selected per-layer terms:
/// `Σ_{l∈s_theta} theta_terms[l] + Σ_{l∈s_r} r_terms[l]`.
pub fn upper_bound_total(
    uib_theta_terms: &[f64],
    uib_r_terms: &[f64],
    s_theta: &[usize],
    s_r: &[usize],
) -> Result<f64, BoundsError> {
    if uib_theta_terms.len() != uib_r_terms.len() {
        return Err(BoundsError::DimensionMismatch {
            left: uib_theta_terms.len(),
            right: uib_r_terms.len(),
        });
    }
    validate_layer_sets(s_theta, s_r, uib_theta_terms.len())?;
    let theta_sum: f64 = s_theta.iter().map(|&l| uib_theta_terms[l - 1]).sum();
    let r_sum: f64 = s_r.iter().map(|&l| uib_r_terms[l - 1]).sum();
    Ok(theta_sum + r_sum)
}

/// Predictive lower-bound estimate: mean over the batch of
/// `log p_model(y|x) - log p̂(y)`, with the label marginal add-one smoothed.
/// The bound's additive constant is dropped; it cancels when comparing
/// iterations.
pub fn lower_bound_y(spec: &ModelSpec, params: &ParamVector, data: &Batch) -> Result<f64, BoundsError> {
    let log_proba = model::predict_log_proba(spec, params, &data.features)?;
    let c = spec.num_classes;
    let n = data.n();
    let mut counts = vec![0usize; c];
    for &y in &data.labels {
        if y >= c {
            return Err(BoundsError::Model(ModelError::LabelOutOfRange {
                row: 0,
                label: y,
                num_classes: c,
            }));
        }
        counts[y] += 1;
    }
    let log_marginal: Vec<f64> = counts
        .iter()
        .map(|&k| ((k + 1) as f64 / (n + c) as f64).ln())
        .collect();
    let mut total = 0.0;
    for (i, &y) in data.labels.iter().enumerate() {
        total += log_proba.get(i, y) - log_marginal[y];
    }
    Ok(total / n as f64)
}

/// Exact joint pmf over two finite alphabets; rows index X, columns Y.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pmf: Matrix,
}

impl DiscreteJoint {
    pub fn new(pmf: Matrix) -> Result<Self, BoundsError> {
        let mut sum = 0.0;
        for &v in pmf.as_slice() {
            if v < 0.0 {
                return Err(BoundsError::InvalidJoint(format!("negative probability {v}")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(BoundsError::InvalidJoint(format!(
                "probabilities sum to {sum}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { pmf })
    }

    /// Random joint: iid uniform weights, normalized. Test fixture helper.
    pub fn seeded(nx: usize, ny: usize, rng: &mut Prng) -> Self {
        let mut values: Vec<f64> = (0..nx * ny).map(|_| rng.next_f64() + 1e-3).collect();
        let sum: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= sum);
        Self { pmf: Matrix::new(nx, ny, values).expect("finite") }
    }

    pub fn nx(&self) -> usize {
        self.pmf.rows()
    }

    pub fn ny(&self) -> usize {
        self.pmf.cols()
    }

    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.pmf.get(x, y)
    }

    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut px = vec![0.0; self.nx()];
        let mut py = vec![0.0; self.ny()];
        for x in 0..self.nx() {
            for y in 0..self.ny() {
                px[x] += self.p(x, y);
                py[y] += self.p(x, y);
            }
        }
        (px, py)
    }

    /// One draw from the joint.
    pub fn sample(&self, rng: &mut Prng) -> (usize, usize) {
        let u = rng.next_f64();
        let mut cumulative = 0.0;
        for x in 0..self.nx() {
            for y in 0..self.ny() {
                cumulative += self.p(x, y);
                if u < cumulative {
                    return (x, y);
                }
            }
        }
        (self.nx() - 1, self.ny() - 1)
    }

    /// One draw from the product of marginals.
    pub fn sample_product(&self, rng: &mut Prng) -> (usize, usize) {
        let (px, py) = self.marginals();
        let mut draw = |p: &[f64]| {
            let u = rng.next_f64();
            let mut cumulative = 0.0;
            for (i, &pi) in p.iter().enumerate() {
                cumulative += pi;
                if u < cumulative {
                    return i;
                }
            }
            p.len() - 1
        };
        (draw(&px), draw(&py))
    }
}

/// Exact discrete mutual information `Σ p(x,y) ln[p(x,y)/(p(x)p(y))]`,
/// with `0·ln 0 := 0`. Clamped at zero against rounding.
pub fn exact_mi_discrete(joint: &DiscreteJoint) -> f64 {
    let (px, py) = joint.marginals();
    let mut mi = 0.0;
    for x in 0..joint.nx() {
        for y in 0..joint.ny() {
            let pxy = joint.p(x, y);
            if pxy > 0.0 {
                mi += pxy * (pxy / (px[x] * py[y])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Empirical lower-bound estimate for mutual information from a critic:
/// `mean_joint[g] - mean_marginal[exp(g - 1)]`.
pub fn nwj_lower_bound<T>(
    g: impl Fn(&T) -> f64,
    joint_samples: &[T],
    marginal_samples: &[T],
) -> f64 {
    let joint_mean = joint_samples.iter().map(&g).sum::<f64>() / joint_samples.len() as f64;
    let marginal_mean = marginal_samples
        .iter()
        .map(|s| (g(s) - 1.0).exp())
        .sum::<f64>()
        / marginal_samples.len() as f64;
    joint_mean - marginal_mean
}

/// Aggregated bound terms for one unlearning run. Field names are fixed by
/// the result-file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEstimate {
    pub uib_theta_terms: Vec<f64>,
    pub uib_r_terms: Vec<f64>,
    pub upper_total: f64,
    pub lower_y: f64,
    pub objective: f64,
}

impl BoundEstimate {
    /// Assemble from per-layer terms; `objective = -lower_y + beta * upper_total`.
    pub fn new(
        uib_theta_terms: Vec<f64>,
        uib_r_terms: Vec<f64>,
        s_theta: &[usize],
        s_r: &[usize],
        lower_y: f64,
        beta: f64,
    ) -> Result<Self, BoundsError> {
        let upper_total = upper_bound_total(&uib_theta_terms, &uib_r_terms, s_theta, s_r)?;
        Ok(Self {
            uib_theta_terms,
            uib_r_terms,
            upper_total,
            lower_y,
            objective: -lower_y + beta * upper_total,
        })
    }
}
