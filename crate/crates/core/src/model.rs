//! Small differentiable classifiers: multinomial logistic regression and a
//! one-hidden-layer tanh MLP.
//!
//! All operations work on a flat parameter vector with per-layer offsets.
//! Gradients are analytic; Hessian-vector products use the Pearlmutter
//! forward-over-reverse recurrences, so a single HVP costs O(p) per sample
//! and the Hessian is never materialized.
//!
//! Layer indices are 1-based throughout (`l` in `1..=L`), matching the
//! layer-set conventions used by the unlearning engine and bound estimators.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::{Matrix, NumericsError, Prng, Vector, PRNG_ALGORITHM};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("label {label} at row {row} is out of range for {num_classes} classes")]
    LabelOutOfRange { row: usize, label: usize, num_classes: usize },
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("training diverged: loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("newton fit did not reach gradient tolerance {tol:.3e} in {max_iter} iterations")]
    NewtonNonConvergence { tol: f64, max_iter: usize },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    LogReg,
    Mlp { hidden_width: usize, activation: Activation },
}

/// Model family, dimensions, and L2 strength. The L2 penalty applies to the
/// whole parameter vector, biases included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub l2_strength: f64,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize, l2_strength: f64) -> Result<Self, ModelError> {
        let spec = Self { architecture: Architecture::LogReg, input_dim, num_classes, l2_strength };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(
        input_dim: usize,
        hidden_width: usize,
        num_classes: usize,
        l2_strength: f64,
    ) -> Result<Self, ModelError> {
        let spec = Self {
            architecture: Architecture::Mlp { hidden_width, activation: Activation::Tanh },
            input_dim,
            num_classes,
            l2_strength,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim < 1 {
            return Err(ModelError::BadSpec("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::BadSpec("num_classes must be >= 2".into()));
        }
        if !(self.l2_strength >= 0.0) {
            return Err(ModelError::BadSpec(format!(
                "l2_strength must be >= 0, got {}",
                self.l2_strength
            )));
        }
        if let Architecture::Mlp { hidden_width, .. } = self.architecture {
            if hidden_width < 1 {
                return Err(ModelError::BadSpec("hidden_width must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Per-layer `(start, length)` offsets into the flat parameter vector.
    /// Each layer is stored as `[weights row-major | biases]`.
    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let d = self.input_dim;
        let c = self.num_classes;
        match self.architecture {
            Architecture::LogReg => vec![(0, c * d + c)],
            Architecture::Mlp { hidden_width: h, .. } => {
                let first = h * d + h;
                vec![(0, first), (first, c * h + c)]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_offsets().iter().map(|&(_, len)| len).sum()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_offsets().len()
    }
}

/// Flat model parameters with per-layer offsets partitioning the vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    theta: Vector,
    layer_offsets: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(theta: Vector, layer_offsets: Vec<(usize, usize)>) -> Result<Self, ModelError> {
        if layer_offsets.is_empty() {
            return Err(ModelError::BadSpec("at least one layer required".into()));
        }
        let mut cursor = 0usize;
        for &(start, len) in &layer_offsets {
            if start != cursor {
                return Err(ModelError::BadSpec(format!(
                    "layer offsets must partition theta contiguously; expected start {cursor}, got {start}"
                )));
            }
            cursor += len;
        }
        if cursor != theta.len() {
            return Err(ModelError::ShapeMismatch {
                what: "layer offsets",
                expected: theta.len(),
                got: cursor,
            });
        }
        Ok(Self { theta, layer_offsets })
    }

    pub fn zeros_for(spec: &ModelSpec) -> Self {
        Self { theta: Vector::zeros(spec.param_count()), layer_offsets: spec.layer_offsets() }
    }

    pub fn theta(&self) -> &Vector {
        &self.theta
    }

    pub fn into_theta(self) -> Vector {
        self.theta
    }

    pub fn layer_offsets(&self) -> &[(usize, usize)] {
        &self.layer_offsets
    }

    pub fn layer_count(&self) -> usize {
        self.layer_offsets.len()
    }

    /// Index range of layer `l` (1-based).
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        assert!(l >= 1 && l <= self.layer_count(), "layer {l} out of 1..={}", self.layer_count());
        let (start, len) = self.layer_offsets[l - 1];
        start..start + len
    }

    pub fn layer_slice(&self, l: usize) -> &[f64] {
        &self.theta.as_slice()[self.layer_range(l)]
    }

    /// Replace the underlying parameter values, keeping the layer structure.
    pub fn with_theta(&self, theta: Vector) -> Result<Self, ModelError> {
        Self::new(theta, self.layer_offsets.clone())
    }

    /// Hex SHA-256 digest of the raw parameter bits (little-endian f64).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.theta.iter() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

/// A feature matrix with aligned class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self, ModelError> {
        if features.rows() == 0 {
            return Err(ModelError::BadSpec("batch must contain at least one sample".into()));
        }
        if features.rows() != labels.len() {
            return Err(ModelError::ShapeMismatch {
                what: "batch labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// New batch holding the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let cols = self.features.cols();
        let mut values = Vec::with_capacity(rows.len() * cols);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Batch {
            features: Matrix::new(rows.len(), cols, values).expect("rows are finite"),
            labels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size < 1 {
            return Err(ModelError::BadSpec("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ModelError::BadSpec("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Final parameters plus the full-dataset loss recorded after each epoch.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: ParamVector,
    pub epoch_losses: Vec<f64>,
}

fn check_shapes(spec: &ModelSpec, params: &ParamVector, batch: Option<&Batch>) -> Result<(), ModelError> {
    if params.theta.len() != spec.param_count() {
        return Err(ModelError::ShapeMismatch {
            what: "parameter vector",
            expected: spec.param_count(),
            got: params.theta.len(),
        });
    }
    if let Some(batch) = batch {
        if batch.dim() != spec.input_dim {
            return Err(ModelError::ShapeMismatch {
                what: "feature dimension",
                expected: spec.input_dim,
                got: batch.dim(),
            });
        }
        for (row, &label) in batch.labels.iter().enumerate() {
            if label >= spec.num_classes {
                return Err(ModelError::LabelOutOfRange { row, label, num_classes: spec.num_classes });
            }
        }
    }
    Ok(())
}

/// log-softmax of `logits` written into `out`; returns log(sum(exp)).
fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

/// Per-sample forward/backward workspace for the two architectures.
struct Scratch {
    logits: Vec<f64>,
    logp: Vec<f64>,
    p: Vec<f64>,
    // MLP-only buffers (empty for LogReg).
    a1: Vec<f64>,
    h1: Vec<f64>,
    delta1: Vec<f64>,
}

impl Scratch {
    fn for_spec(spec: &ModelSpec) -> Self {
        let c = spec.num_classes;
        let h = match spec.architecture {
            Architecture::LogReg => 0,
            Architecture::Mlp { hidden_width, .. } => hidden_width,
        };
        Scratch {
            logits: vec![0.0; c],
            logp: vec![0.0; c],
            p: vec![0.0; c],
            a1: vec![0.0; h],
            h1: vec![0.0; h],
            delta1: vec![0.0; h],
        }
    }
}

/// Forward pass for one sample; fills logits/logp/p (and hidden activations
/// for the MLP). Returns the cross-entropy for label `y`.
fn sample_forward(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize, s: &mut Scratch) -> f64 {
    let d = spec.input_dim;
    let c = spec.num_classes;
    match spec.architecture {
        Architecture::LogReg => {
            let (w, b) = theta.split_at(c * d);
            for k in 0..c {
                let row = &w[k * d..(k + 1) * d];
                s.logits[k] = b[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Architecture::Mlp { hidden_width: h, .. } => {
            let first = h * d + h;
            let (w1, rest) = theta.split_at(h * d);
            let (b1, layer2) = rest.split_at(h);
            debug_assert_eq!(first, h * d + h);
            let (w2, b2) = layer2.split_at(c * h);
            for t in 0..h {
                let row = &w1[t * d..(t + 1) * d];
                s.a1[t] = b1[t] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                s.h1[t] = s.a1[t].tanh();
            }
            for k in 0..c {
                let row = &w2[k * h..(k + 1) * h];
                s.logits[k] = b2[k] + row.iter().zip(&s.h1).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    log_softmax(&s.logits, &mut s.logp);
    for k in 0..c {
        s.p[k] = s.logp[k].exp();
    }
    -s.logp[y]
}

/// Gradient of the per-sample cross-entropy, accumulated into `out` with
/// weight `scale`. Requires `sample_forward` to have been called for (x, y).
fn sample_backward(spec: &ModelSpec, theta: &[f64], x: &[f64], y: usize, scale: f64, s: &mut Scratch, out: &mut [f64]) {
    let d = spec.input_dim;
    let c = spec.num_classes;
    match spec.architecture {
        Architecture::LogReg => {
            let (gw, gb) = out.split_at_mut(c * d);
            for k in 0..c {
                let delta = s.p[k] - if k == y { 1.0 } else { 0.0 };
                let grow = &mut gw[k * d..(k + 1) * d];
                for (g, &xj) in grow.iter_mut().zip(x) {
                    *g += scale * delta * xj;
                }
                gb[k] += scale * delta;
            }
        }
        Architecture::Mlp { hidden_width: h, .. } => {
            let first = h * d + h;
            let (w2, _b2) = theta[first..].split_at(c * h);
            let (out1, out2) = out.split_at_mut(first);
            let (gw1, gb1) = out1.split_at_mut(h * d);
            let (gw2, gb2) = out2.split_at_mut(c * h);
            for t in 0..h {
                s.delta1[t] = 0.0;
            }
            for k in 0..c {
                let delta2 = s.p[k] - if k == y { 1.0 } else { 0.0 };
                let grow = &mut gw2[k * h..(k + 1) * h];
                for t in 0..h {
                    grow[t] += scale * delta2 * s.h1[t];
                    s.delta1[t] += w2[k * h + t] * delta2;
                }
                gb2[k] += scale * delta2;
            }
            for t in 0..h {
                let delta1 = s.delta1[t] * (1.0 - s.h1[t] * s.h1[t]);
                let grow = &mut gw1[t * d..(t + 1) * d];
                for (g, &xj) in grow.iter_mut().zip(x) {
                    *g += scale * delta1 * xj;
                }
                gb1[t] += scale * delta1;
            }
        }
    }
}

/// Mean cross-entropy over the batch plus `l2/2 * ||theta||^2`.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64, ModelError> {
    check_shapes(spec, params, Some(batch))?;
    let theta = params.theta.as_slice();
    let mut s = Scratch::for_spec(spec);
    let mut total = 0.0;
    for i in 0..batch.n() {
        total += sample_forward(spec, theta, batch.features.row(i), batch.labels[i], &mut s);
    }
    let data = total / batch.n() as f64;
    let penalty = 0.5 * spec.l2_strength * theta.iter().map(|v| v * v).sum::<f64>();
    Ok(data + penalty)
}

/// Gradient of the data term only (mean cross-entropy, no L2).
pub fn grad_data(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vector, ModelError> {
    check_shapes(spec, params, Some(batch))?;
    let theta = params.theta.as_slice();
    let mut s = Scratch::for_spec(spec);
    let mut out = vec![0.0; theta.len()];
    let scale = 1.0 / batch.n() as f64;
    for i in 0..batch.n() {
        let x = batch.features.row(i);
        let y = batch.labels[i];
        sample_forward(spec, theta, x, y, &mut s);
        sample_backward(spec, theta, x, y, scale, &mut s, &mut out);
    }
    Ok(Vector::raw(out))
}

/// Exact analytic gradient of [`loss`] (data term plus `l2 * theta`).
pub fn grad(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vector, ModelError> {
    let mut g = grad_data(spec, params, batch)?;
    let l2 = spec.l2_strength;
    for (gi, ti) in g.as_mut_slice().iter_mut().zip(params.theta.iter()) {
        *gi += l2 * ti;
    }
    Ok(g)
}

/// Hessian-vector product of the data term (no L2), Pearlmutter style.
pub fn hvp_data(spec: &ModelSpec, params: &ParamVector, batch: &Batch, v: &Vector) -> Result<Vector, ModelError> {
    check_shapes(spec, params, Some(batch))?;
    if v.len() != params.theta.len() {
        return Err(ModelError::ShapeMismatch {
            what: "hvp direction",
            expected: params.theta.len(),
            got: v.len(),
        });
    }
    let theta = params.theta.as_slice();
    let vv = v.as_slice();
    let d = spec.input_dim;
    let c = spec.num_classes;
    let mut s = Scratch::for_spec(spec);
    let mut out = vec![0.0; theta.len()];
    let scale = 1.0 / batch.n() as f64;
    match spec.architecture {
        Architecture::LogReg => {
            let (vw, vb) = vv.split_at(c * d);
            let (hw, hb) = out.split_at_mut(c * d);
            let mut u = vec![0.0; c];
            for i in 0..batch.n() {
                let x = batch.features.row(i);
                sample_forward(spec, theta, x, batch.labels[i], &mut s);
                for k in 0..c {
                    let row = &vw[k * d..(k + 1) * d];
                    u[k] = vb[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                let pu: f64 = s.p.iter().zip(&u).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    let sk = s.p[k] * (u[k] - pu);
                    let hrow = &mut hw[k * d..(k + 1) * d];
                    for (hkj, &xj) in hrow.iter_mut().zip(x) {
                        *hkj += scale * sk * xj;
                    }
                    hb[k] += scale * sk;
                }
            }
        }
        Architecture::Mlp { hidden_width: h, .. } => {
            let first = h * d + h;
            let (vw1, vrest) = vv.split_at(h * d);
            let (vb1, vlayer2) = vrest.split_at(h);
            let (vw2, vb2) = vlayer2.split_at(c * h);
            let (w2, _b2) = theta[first..].split_at(c * h);
            let mut ra1 = vec![0.0; h];
            let mut rh1 = vec![0.0; h];
            let mut ra2 = vec![0.0; c];
            let mut rdelta2 = vec![0.0; c];
            let mut u = vec![0.0; h];
            let mut ru = vec![0.0; h];
            for i in 0..batch.n() {
                let x = batch.features.row(i);
                let y = batch.labels[i];
                sample_forward(spec, theta, x, y, &mut s);
                // R-forward
                for t in 0..h {
                    let row = &vw1[t * d..(t + 1) * d];
                    ra1[t] = vb1[t] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                    rh1[t] = (1.0 - s.h1[t] * s.h1[t]) * ra1[t];
                }
                for k in 0..c {
                    let vrow = &vw2[k * h..(k + 1) * h];
                    let wrow = &w2[k * h..(k + 1) * h];
                    ra2[k] = vb2[k]
                        + vrow.iter().zip(&s.h1).map(|(a, b)| a * b).sum::<f64>()
                        + wrow.iter().zip(&rh1).map(|(a, b)| a * b).sum::<f64>();
                }
                let p_ra2: f64 = s.p.iter().zip(&ra2).map(|(a, b)| a * b).sum();
                for k in 0..c {
                    rdelta2[k] = s.p[k] * (ra2[k] - p_ra2);
                }
                // R-backward
                for t in 0..h {
                    u[t] = 0.0;
                    ru[t] = 0.0;
                }
                {
                    let (out1, out2) = out.split_at_mut(first);
                    let (hw1, hb1) = out1.split_at_mut(h * d);
                    let (hw2, hb2) = out2.split_at_mut(c * h);
                    for k in 0..c {
                        let delta2 = s.p[k] - if k == y { 1.0 } else { 0.0 };
                        let hrow = &mut hw2[k * h..(k + 1) * h];
                        for t in 0..h {
                            hrow[t] += scale * (rdelta2[k] * s.h1[t] + delta2 * rh1[t]);
                            u[t] += w2[k * h + t] * delta2;
                            ru[t] += vw2[k * h + t] * delta2 + w2[k * h + t] * rdelta2[k];
                        }
                        hb2[k] += scale * rdelta2[k];
                    }
                    for t in 0..h {
                        let t1 = 1.0 - s.h1[t] * s.h1[t];
                        let rt1 = -2.0 * s.h1[t] * rh1[t];
                        let rdelta1 = ru[t] * t1 + u[t] * rt1;
                        let hrow = &mut hw1[t * d..(t + 1) * d];
                        for (hj, &xj) in hrow.iter_mut().zip(x) {
                            *hj += scale * rdelta1 * xj;
                        }
                        hb1[t] += scale * rdelta1;
                    }
                }
            }
        }
    }
    Ok(Vector::raw(out))
}

/// Hessian-vector product of [`loss`]: data-term HVP plus `l2 * v`.
pub fn hvp(spec: &ModelSpec, params: &ParamVector, batch: &Batch, v: &Vector) -> Result<Vector, ModelError> {
    let mut hv = hvp_data(spec, params, batch, v)?;
    let l2 = spec.l2_strength;
    for (out, &vi) in hv.as_mut_slice().iter_mut().zip(v.as_slice()) {
        *out += l2 * vi;
    }
    Ok(hv)
}

/// Diagonal of the empirical Fisher: mean over samples of the squared
/// per-sample data-gradient, plus `l2_strength` on every component.
pub fn fisher_diag(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Vector, ModelError> {
    check_shapes(spec, params, Some(batch))?;
    let theta = params.theta.as_slice();
    let mut s = Scratch::for_spec(spec);
    let mut per_sample = vec![0.0; theta.len()];
    let mut out = vec![0.0; theta.len()];
    let scale = 1.0 / batch.n() as f64;
    for i in 0..batch.n() {
        let x = batch.features.row(i);
        let y = batch.labels[i];
        per_sample.iter_mut().for_each(|v| *v = 0.0);
        sample_forward(spec, theta, x, y, &mut s);
        sample_backward(spec, theta, x, y, 1.0, &mut s, &mut per_sample);
        for (o, g) in out.iter_mut().zip(&per_sample) {
            *o += scale * g * g;
        }
    }
    for o in out.iter_mut() {
        *o += spec.l2_strength;
    }
    Ok(Vector::raw(out))
}

/// Row-wise class probabilities for a feature matrix.
pub fn predict_proba(spec: &ModelSpec, params: &ParamVector, features: &Matrix) -> Result<Matrix, ModelError> {
    check_shapes(spec, params, None)?;
    if features.cols() != spec.input_dim {
        return Err(ModelError::ShapeMismatch {
            what: "feature dimension",
            expected: spec.input_dim,
            got: features.cols(),
        });
    }
    let theta = params.theta.as_slice();
    let mut s = Scratch::for_spec(spec);
    let c = spec.num_classes;
    let mut values = Vec::with_capacity(features.rows() * c);
    for i in 0..features.rows() {
        sample_forward(spec, theta, features.row(i), 0, &mut s);
        values.extend_from_slice(&s.p);
    }
    Ok(Matrix::new(features.rows(), c, values)?)
}

/// Row-wise log-probabilities (log-softmax); stays finite even when the
/// probabilities saturate.
pub fn predict_log_proba(spec: &ModelSpec, params: &ParamVector, features: &Matrix) -> Result<Matrix, ModelError> {
    check_shapes(spec, params, None)?;
    if features.cols() != spec.input_dim {
        return Err(ModelError::ShapeMismatch {
            what: "feature dimension",
            expected: spec.input_dim,
            got: features.cols(),
        });
    }
    let theta = params.theta.as_slice();
    let mut s = Scratch::for_spec(spec);
    let c = spec.num_classes;
    let mut values = Vec::with_capacity(features.rows() * c);
    for i in 0..features.rows() {
        sample_forward(spec, theta, features.row(i), 0, &mut s);
        values.extend_from_slice(&s.logp);
    }
    Ok(Matrix::new(features.rows(), c, values)?)
}

/// Argmax class per row; ties resolve to the lowest class index.
pub fn predict_labels(spec: &ModelSpec, params: &ParamVector, features: &Matrix) -> Result<Vec<usize>, ModelError> {
    let proba = predict_proba(spec, params, features)?;
    Ok((0..proba.rows())
        .map(|i| {
            let row = proba.row(i);
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Parameters initialized uniformly in [-0.05, 0.05] from the given seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = Prng::new(seed);
    let theta = Vector::from_fn(spec.param_count(), |_| rng.uniform(-0.05, 0.05));
    ParamVector::new(theta, spec.layer_offsets()).expect("offsets match spec")
}

/// Mini-batch SGD from a fresh seeded initialization.
pub fn train_sgd(spec: &ModelSpec, data: &Batch, cfg: &TrainConfig) -> Result<TrainRun, ModelError> {
    train_sgd_from(spec, data, cfg, init_params(spec, cfg.seed))
}

/// Mini-batch SGD continuing from `init`. Deterministic for a given seed:
/// per-epoch shuffles come from a `Prng` seeded with `cfg.seed`.
pub fn train_sgd_from(
    spec: &ModelSpec,
    data: &Batch,
    cfg: &TrainConfig,
    init: ParamVector,
) -> Result<TrainRun, ModelError> {
    cfg.validate()?;
    check_shapes(spec, &init, Some(data))?;
    let mut params = init;
    let mut rng = Prng::new(cfg.seed);
    let mut order: Vec<usize> = (0..data.n()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mini = data.select(chunk);
            let g = grad(spec, &params, &mini)?;
            params = params.with_theta(params.theta.add_scaled(-cfg.learning_rate, &g))?;
        }
        let epoch_loss = loss(spec, &params, data)?;
        if !epoch_loss.is_finite() {
            return Err(ModelError::Divergence { epoch });
        }
        epoch_losses.push(epoch_loss);
    }
    Ok(TrainRun { params, epoch_losses })
}

/// Dense damped Newton fit to gradient tolerance. Only sensible for small
/// convex problems (LogReg with L2); used as the exact-minimizer oracle in
/// leave-one-out comparisons.
pub fn fit_newton(
    spec: &ModelSpec,
    data: &Batch,
    init: ParamVector,
    grad_tol: f64,
    max_iter: usize,
) -> Result<ParamVector, ModelError> {
    check_shapes(spec, &init, Some(data))?;
    let p = spec.param_count();
    let mut params = init;
    for _ in 0..max_iter {
        let g = grad(spec, &params, data)?;
        if g.norm_inf() <= grad_tol {
            return Ok(params);
        }
        // Assemble the dense Hessian column by column via HVPs.
        let mut h = Matrix::zeros(p, p);
        for j in 0..p {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            let col = hvp(spec, &params, data, &Vector::raw(e))?;
            for i in 0..p {
                h.set(i, j, col[i]);
            }
        }
        let step = h.solve_dense(&g)?;
        let current = loss(spec, &params, data)?;
        // Accept within one part in 1e12: near the optimum the loss is flat
        // to machine precision while the gradient still shrinks.
        let slack = current + 1e-12 * (1.0 + current.abs());
        let mut size = 1.0;
        loop {
            let candidate = params.with_theta(params.theta.add_scaled(-size, &step))?;
            let candidate_loss = loss(spec, &candidate, data)?;
            if candidate_loss.is_finite() && candidate_loss <= slack {
                params = candidate;
                break;
            }
            size *= 0.5;
            if size < 1e-12 {
                return Err(ModelError::NewtonNonConvergence { tol: grad_tol, max_iter });
            }
        }
    }
    let g = grad(spec, &params, data)?;
    if g.norm_inf() <= grad_tol {
        Ok(params)
    } else {
        Err(ModelError::NewtonNonConvergence { tol: grad_tol, max_iter })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    rng_algorithm: String,
    seed: u64,
    spec: ModelSpec,
    layer_offsets: Vec<(usize, usize)>,
    theta: Vec<f64>,
}

/// Loaded checkpoint contents.
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub seed: u64,
}

/// Write a versioned JSON checkpoint. Floats are serialized in shortest
/// round-trip form, so load/save is lossless.
pub fn save_checkpoint(
    path: &Path,
    spec: &ModelSpec,
    params: &ParamVector,
    seed: u64,
) -> Result<(), ModelError> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        rng_algorithm: PRNG_ALGORITHM.to_string(),
        seed,
        spec: spec.clone(),
        layer_offsets: params.layer_offsets().to_vec(),
        theta: params.theta().as_slice().to_vec(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    file.spec.validate()?;
    let params = ParamVector::new(Vector::new(file.theta)?, file.layer_offsets)?;
    Ok(Checkpoint { spec: file.spec, params, seed: file.seed })
}
