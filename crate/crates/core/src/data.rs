//! Dataset construction: a synthetic biased-classification generator,
//! pattern-point assembly, unlearn-request construction, IDX-format parsing,
//! and splits.
//!
//! The synthetic generator appends a bias feature block to class-conditional
//! Gaussian clusters. In the train and biased-test splits the bias channel is
//! a deterministic function of the label; in the uniform test split it is
//! drawn independently of the label. Datasets are immutable after
//! construction.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Batch;
use crate::numerics::{Matrix, NumericsError, Prng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("feature index {index} out of range for {dim} features")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("sample id {id} out of range for {n} rows")]
    SampleOutOfRange { id: usize, n: usize },
    #[error("pattern matches no samples")]
    EmptyPattern,
    #[error("replacement length {got} does not match |K| = {expected}")]
    ReplacementLength { expected: usize, got: usize },
    #[error("request exceeds budget: {removed} of {total} {unit} removed, budget {budget} allows {allowed:.1}")]
    BudgetExceeded { removed: usize, total: usize, unit: &'static str, budget: f64, allowed: f64 },
    #[error("bad idx magic 0x{found:08x}")]
    BadMagic { found: u32 },
    #[error("truncated idx payload: need {expected} bytes, have {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    TestBiased,
    TestUniform,
}

/// Feature matrix with labels and an optional per-sample bias attribute
/// (the injected channel id for synthetic data).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub bias_attr: Option<Vec<usize>>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        bias_attr: Option<Vec<usize>>,
        split_tag: SplitTag,
    ) -> Result<Self, DataError> {
        if features.rows() == 0 {
            return Err(DataError::InvalidConfig("dataset must have at least one row".into()));
        }
        if labels.len() != features.rows() {
            return Err(DataError::InvalidConfig(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(attr) = &bias_attr {
            if attr.len() != features.rows() {
                return Err(DataError::InvalidConfig(format!(
                    "{} bias attributes for {} rows",
                    attr.len(),
                    features.rows()
                )));
            }
        }
        Ok(Self { features, labels, bias_attr, split_tag })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// View as a model batch (features + labels, bias attribute dropped).
    pub fn to_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone()).expect("dataset rows >= 1")
    }

    /// Sub-dataset holding the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset, DataError> {
        let cols = self.dim();
        let mut values = Vec::with_capacity(rows.len() * cols);
        let mut labels = Vec::with_capacity(rows.len());
        let mut attrs = self.bias_attr.as_ref().map(|_| Vec::with_capacity(rows.len()));
        for &r in rows {
            if r >= self.n() {
                return Err(DataError::SampleOutOfRange { id: r, n: self.n() });
            }
            values.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
            if let (Some(acc), Some(src)) = (attrs.as_mut(), self.bias_attr.as_ref()) {
                acc.push(src[r]);
            }
        }
        Dataset::new(Matrix::new(rows.len(), cols, values)?, labels, attrs, self.split_tag)
    }

    /// Dataset with the given rows removed.
    pub fn without_rows(&self, remove: &BTreeSet<usize>) -> Result<Dataset, DataError> {
        let keep: Vec<usize> = (0..self.n()).filter(|i| !remove.contains(i)).collect();
        if keep.is_empty() {
            return Err(DataError::InvalidConfig("removing every row".into()));
        }
        self.select(&keep)
    }

    /// CSV export: header row, then one sample per row with columns
    /// `feature_0..feature_{m-1}, label, bias_attr` (blank when absent).
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        for j in 0..self.dim() {
            write!(out, "feature_{j},")?;
        }
        writeln!(out, "label,bias_attr")?;
        for i in 0..self.n() {
            for &v in self.features.row(i) {
                write!(out, "{v},")?;
            }
            match &self.bias_attr {
                Some(attr) => writeln!(out, "{},{}", self.labels[i], attr[i])?,
                None => writeln!(out, "{},", self.labels[i])?,
            }
        }
        Ok(())
    }
}

/// Configuration for the synthetic biased generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub core_dim: usize,
    pub bias_dim: usize,
    pub bias_strength: f64,
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_classes: 4,
            core_dim: 8,
            bias_dim: 4,
            bias_strength: 3.0,
            class_separation: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_samples < 1 || self.num_classes < 1 || self.core_dim < 1 || self.bias_dim < 1 {
            return Err(DataError::InvalidConfig("all counts must be >= 1".into()));
        }
        if !(self.bias_strength >= 0.0) {
            return Err(DataError::InvalidConfig("bias_strength must be >= 0".into()));
        }
        if !self.class_separation.is_finite() {
            return Err(DataError::InvalidConfig("class_separation must be finite".into()));
        }
        Ok(())
    }

    /// Total feature dimension: core block followed by bias block.
    pub fn total_dim(&self) -> usize {
        self.core_dim + self.bias_dim
    }

    /// Indices of the appended bias block.
    pub fn bias_block(&self) -> Vec<usize> {
        (self.core_dim..self.total_dim()).collect()
    }
}

fn class_means(cfg: &SynthConfig, rng: &mut Prng) -> Vec<Vec<f64>> {
    (0..cfg.num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..cfg.core_dim).map(|_| rng.normal(0.0, 1.0)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| cfg.class_separation * v / norm).collect()
        })
        .collect()
}

fn generate_split(
    cfg: &SynthConfig,
    means: &[Vec<f64>],
    rng: &mut Prng,
    tag: SplitTag,
) -> Result<Dataset, DataError> {
    let m = cfg.total_dim();
    let mut values = Vec::with_capacity(cfg.num_samples * m);
    let mut labels = Vec::with_capacity(cfg.num_samples);
    let mut attrs = Vec::with_capacity(cfg.num_samples);
    for _ in 0..cfg.num_samples {
        let y = rng.next_below(cfg.num_classes);
        let channel = match tag {
            SplitTag::Train | SplitTag::TestBiased => y % cfg.bias_dim,
            SplitTag::TestUniform => rng.next_below(cfg.bias_dim),
        };
        for j in 0..cfg.core_dim {
            values.push(means[y][j] + rng.normal(0.0, 1.0));
        }
        for j in 0..cfg.bias_dim {
            values.push(if j == channel { cfg.bias_strength } else { 0.0 });
        }
        labels.push(y);
        attrs.push(channel);
    }
    Dataset::new(Matrix::new(cfg.num_samples, m, values)?, labels, Some(attrs), tag)
}

/// Generate `(train, test_biased, test_uniform)`, each with
/// `cfg.num_samples` rows.
///
/// Features are `[core block | bias block]`. The core block is a
/// class-conditional Gaussian cluster; the bias block is a one-hot channel
/// scaled by `bias_strength`. In train/test_biased the channel is
/// `label % bias_dim`; in test_uniform it is drawn uniformly, independent of
/// the label.
pub fn generate_biased(cfg: &SynthConfig) -> Result<(Dataset, Dataset, Dataset), DataError> {
    cfg.validate()?;
    let mut rng = Prng::new(cfg.seed);
    let means = class_means(cfg, &mut rng);
    let train = generate_split(cfg, &means, &mut rng, SplitTag::Train)?;
    let test_biased = generate_split(cfg, &means, &mut rng, SplitTag::TestBiased)?;
    let test_uniform = generate_split(cfg, &means, &mut rng, SplitTag::TestUniform)?;
    Ok((train, test_biased, test_uniform))
}

/// The unit of systematic unlearning: entries at feature indices `K` for
/// every covered sample, with per-feature replacement values defining the
/// perturbed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternPoint {
    pub feature_idx: Vec<usize>,
    pub label_idx: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub replacement: Vec<f64>,
}

impl PatternPoint {
    pub fn validate(&self, ds: &Dataset) -> Result<(), DataError> {
        if self.feature_idx.is_empty() {
            return Err(DataError::InvalidConfig("pattern feature set K must be non-empty".into()));
        }
        for &k in &self.feature_idx {
            if k >= ds.dim() {
                return Err(DataError::IndexOutOfRange { index: k, dim: ds.dim() });
            }
        }
        for &id in &self.sample_ids {
            if id >= ds.n() {
                return Err(DataError::SampleOutOfRange { id, n: ds.n() });
            }
        }
        if self.replacement.len() != self.feature_idx.len() {
            return Err(DataError::ReplacementLength {
                expected: self.feature_idx.len(),
                got: self.replacement.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    Zeros,
    FeatureMean,
}

/// Build the pattern point covering every sample whose label is in `L`,
/// with replacement values filled per policy. Returned as a one-element
/// list; callers composing per-class patterns invoke this once per label.
pub fn build_pattern_points(
    ds: &Dataset,
    feature_idx: &[usize],
    label_idx: &[usize],
    policy: ReplacementPolicy,
) -> Result<Vec<PatternPoint>, DataError> {
    if feature_idx.is_empty() {
        return Err(DataError::InvalidConfig("pattern feature set K must be non-empty".into()));
    }
    for &k in feature_idx {
        if k >= ds.dim() {
            return Err(DataError::IndexOutOfRange { index: k, dim: ds.dim() });
        }
    }
    let label_set: BTreeSet<usize> = label_idx.iter().copied().collect();
    let sample_ids: Vec<usize> = (0..ds.n()).filter(|&i| label_set.contains(&ds.labels[i])).collect();
    if sample_ids.is_empty() {
        return Err(DataError::EmptyPattern);
    }
    let replacement = match policy {
        ReplacementPolicy::Zeros => vec![0.0; feature_idx.len()],
        ReplacementPolicy::FeatureMean => feature_idx
            .iter()
            .map(|&k| {
                (0..ds.n()).map(|i| ds.features.get(i, k)).sum::<f64>() / ds.n() as f64
            })
            .collect(),
    };
    Ok(vec![PatternPoint {
        feature_idx: feature_idx.to_vec(),
        label_idx: label_idx.to_vec(),
        sample_ids,
        replacement,
    }])
}

/// New dataset where, for each covered sample, features at `K` are replaced
/// by the pattern's replacement values. All other entries are untouched.
pub fn apply_replacement(ds: &Dataset, pattern: &PatternPoint) -> Result<Dataset, DataError> {
    pattern.validate(ds)?;
    let mut features = ds.features.clone();
    for &i in &pattern.sample_ids {
        for (&k, &value) in pattern.feature_idx.iter().zip(&pattern.replacement) {
            features.set(i, k, value);
        }
    }
    Dataset::new(features, ds.labels.clone(), ds.bias_attr.clone(), ds.split_tag)
}

/// What to remove, plus the fraction of the relevant total the request may
/// touch. Pattern mode counts features; random mode counts samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RequestMode {
    SystematicPatterns(Vec<PatternPoint>),
    RandomPoints(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub mode: RequestMode,
    pub budget_fraction: f64,
}

impl UnlearnRequest {
    /// Systematic-pattern request. The budget counts distinct features in
    /// the union of the patterns' K sets against `feature_denominator`
    /// (normally the dataset's full feature count).
    pub fn systematic_over(
        patterns: Vec<PatternPoint>,
        budget_fraction: f64,
        feature_denominator: usize,
    ) -> Result<Self, DataError> {
        check_budget_fraction(budget_fraction)?;
        let union: BTreeSet<usize> =
            patterns.iter().flat_map(|p| p.feature_idx.iter().copied()).collect();
        let allowed = budget_fraction * feature_denominator as f64;
        if union.len() as f64 > allowed + 1e-12 {
            return Err(DataError::BudgetExceeded {
                removed: union.len(),
                total: feature_denominator,
                unit: "features",
                budget: budget_fraction,
                allowed,
            });
        }
        Ok(Self { mode: RequestMode::SystematicPatterns(patterns), budget_fraction })
    }

    pub fn systematic(
        patterns: Vec<PatternPoint>,
        budget_fraction: f64,
        ds: &Dataset,
    ) -> Result<Self, DataError> {
        for p in &patterns {
            p.validate(ds)?;
        }
        Self::systematic_over(patterns, budget_fraction, ds.dim())
    }

    /// Random-point request; the budget counts removed samples against the
    /// dataset's row count. Ids are deduplicated and sorted.
    pub fn random_points(
        ids: Vec<usize>,
        budget_fraction: f64,
        ds: &Dataset,
    ) -> Result<Self, DataError> {
        check_budget_fraction(budget_fraction)?;
        let set: BTreeSet<usize> = ids.into_iter().collect();
        for &id in &set {
            if id >= ds.n() {
                return Err(DataError::SampleOutOfRange { id, n: ds.n() });
            }
        }
        let allowed = budget_fraction * ds.n() as f64;
        if set.len() as f64 > allowed + 1e-12 {
            return Err(DataError::BudgetExceeded {
                removed: set.len(),
                total: ds.n(),
                unit: "samples",
                budget: budget_fraction,
                allowed,
            });
        }
        Ok(Self { mode: RequestMode::RandomPoints(set.into_iter().collect()), budget_fraction })
    }

    pub fn is_empty(&self) -> bool {
        match &self.mode {
            RequestMode::SystematicPatterns(p) => p.is_empty(),
            RequestMode::RandomPoints(ids) => ids.is_empty(),
        }
    }
}

fn check_budget_fraction(f: f64) -> Result<(), DataError> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "budget_fraction must be in (0, 1], got {f}"
        )));
    }
    Ok(())
}

pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Parsed IDX payload: raw label bytes, or pixels mapped to [0,1] by /255.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Labels(Vec<u8>),
    Images(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdxFile {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::TruncatedPayload { expected: end, actual: bytes.len() });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// Parse an IDX file: big-endian magic (`0x00000801` labels / `0x00000803`
/// images), big-endian 32-bit dims, then the byte payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile, DataError> {
    let magic = read_be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_MAGIC_LABELS => 1,
        IDX_MAGIC_IMAGES => 3,
        other => return Err(DataError::BadMagic { found: other }),
    };
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(read_be_u32(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    let expected = header + count;
    if bytes.len() < expected {
        return Err(DataError::TruncatedPayload { expected, actual: bytes.len() });
    }
    let payload = &bytes[header..expected];
    let data = match magic {
        IDX_MAGIC_LABELS => IdxData::Labels(payload.to_vec()),
        _ => IdxData::Images(payload.iter().map(|&b| b as f64 / 255.0).collect()),
    };
    Ok(IdxFile { dims, data })
}

/// Deterministic random split into `(first, second)` with the first part
/// holding `round(fraction * n)` rows (clamped so both parts are non-empty).
pub fn split_random(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    if ds.n() < 2 {
        return Err(DataError::InvalidConfig("cannot split a single-row dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.n()).collect();
    let mut rng = Prng::new(seed);
    rng.shuffle(&mut order);
    let k = ((fraction * ds.n() as f64).round() as usize).clamp(1, ds.n() - 1);
    let mut first: Vec<usize> = order[..k].to_vec();
    let mut second: Vec<usize> = order[k..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((ds.select(&first)?, ds.select(&second)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropy(counts: &[usize]) -> f64 {
        let n: usize = counts.iter().sum();
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    }

    #[test]
    fn zero_bias_strength_zeroes_the_bias_block() {
        let cfg = SynthConfig { bias_strength: 0.0, num_samples: 50, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        for i in 0..train.n() {
            for &j in &cfg.bias_block() {
                assert_eq!(train.features.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn train_split_bias_attr_determined_by_label() {
        let cfg = SynthConfig::default();
        let (train, test_biased, _) = generate_biased(&cfg).unwrap();
        for ds in [&train, &test_biased] {
            let attr = ds.bias_attr.as_ref().unwrap();
            for i in 0..ds.n() {
                assert_eq!(attr[i], ds.labels[i] % cfg.bias_dim);
            }
        }
    }

    #[test]
    fn train_split_mutual_information_equals_label_entropy() {
        // bias = f(label) with f injective (4 classes, 4 channels), so the
        // empirical MI of the contingency table equals the label entropy.
        let cfg = SynthConfig::default();
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let attr = train.bias_attr.as_ref().unwrap();
        let c = cfg.num_classes;
        let b = cfg.bias_dim;
        let mut joint = vec![0usize; c * b];
        let mut label_counts = vec![0usize; c];
        for i in 0..train.n() {
            joint[train.labels[i] * b + attr[i]] += 1;
            label_counts[train.labels[i]] += 1;
        }
        let n = train.n() as f64;
        let mut attr_counts = vec![0usize; b];
        for y in 0..c {
            for a in 0..b {
                attr_counts[a] += joint[y * b + a];
            }
        }
        let mut mi = 0.0;
        for y in 0..c {
            for a in 0..b {
                let pxy = joint[y * b + a] as f64 / n;
                if pxy > 0.0 {
                    let px = label_counts[y] as f64 / n;
                    let pa = attr_counts[a] as f64 / n;
                    mi += pxy * (pxy / (px * pa)).ln();
                }
            }
        }
        let h = entropy(&label_counts);
        assert!((mi - h).abs() < 1e-12, "mi {mi} vs H(label) {h}");
    }

    #[test]
    fn uniform_split_bias_is_nearly_independent() {
        let cfg = SynthConfig::default();
        let (_, _, test_uniform) = generate_biased(&cfg).unwrap();
        let attr = test_uniform.bias_attr.as_ref().unwrap();
        // Cramér's V from the contingency table.
        let c = cfg.num_classes;
        let b = cfg.bias_dim;
        let mut joint = vec![0.0; c * b];
        let mut rows = vec![0.0; c];
        let mut cols = vec![0.0; b];
        let n = test_uniform.n() as f64;
        for i in 0..test_uniform.n() {
            joint[test_uniform.labels[i] * b + attr[i]] += 1.0;
            rows[test_uniform.labels[i]] += 1.0;
            cols[attr[i]] += 1.0;
        }
        let mut chi2 = 0.0;
        for y in 0..c {
            for a in 0..b {
                let expected = rows[y] * cols[a] / n;
                if expected > 0.0 {
                    chi2 += (joint[y * b + a] - expected).powi(2) / expected;
                }
            }
        }
        let v = (chi2 / (n * (c.min(b) as f64 - 1.0))).sqrt();
        assert!(v < 0.1, "Cramér's V = {v}");
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_biased(&cfg).unwrap();
        let b = generate_biased(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn pattern_over_all_classes_covers_all_rows() {
        let cfg = SynthConfig { num_samples: 100, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let patterns =
            build_pattern_points(&train, &cfg.bias_block(), &[0, 1, 2, 3], ReplacementPolicy::Zeros)
                .unwrap();
        assert_eq!(patterns.len(), 1);
        assert_eq!(patterns[0].sample_ids.len(), train.n());
        assert!(patterns[0].replacement.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_mean_replacement_matches_column_means() {
        let cfg = SynthConfig { num_samples: 64, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let k = [0usize, 3, 9];
        let patterns =
            build_pattern_points(&train, &k, &[1], ReplacementPolicy::FeatureMean).unwrap();
        for (slot, &kj) in patterns[0].replacement.iter().zip(&k) {
            let mean =
                (0..train.n()).map(|i| train.features.get(i, kj)).sum::<f64>() / train.n() as f64;
            assert!((slot - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_pattern_is_an_error() {
        let cfg = SynthConfig { num_samples: 30, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        // No sample carries a label >= num_classes.
        let err = build_pattern_points(&train, &[0], &[99], ReplacementPolicy::Zeros).unwrap_err();
        assert!(matches!(err, DataError::EmptyPattern));
    }

    #[test]
    fn replacement_identity_when_values_match() {
        let cfg = SynthConfig { num_samples: 20, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let pattern = PatternPoint {
            feature_idx: vec![2],
            label_idx: vec![0],
            sample_ids: vec![0],
            replacement: vec![train.features.get(0, 2)],
        };
        let replaced = apply_replacement(&train, &pattern).unwrap();
        assert_eq!(replaced, train);
    }

    #[test]
    fn replacement_touches_only_selected_entries() {
        let cfg = SynthConfig { num_samples: 40, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let patterns =
            build_pattern_points(&train, &cfg.bias_block(), &[1], ReplacementPolicy::Zeros).unwrap();
        let replaced = apply_replacement(&train, &patterns[0]).unwrap();
        let covered: BTreeSet<usize> = patterns[0].sample_ids.iter().copied().collect();
        for i in 0..train.n() {
            for j in 0..train.dim() {
                let original = train.features.get(i, j);
                let new = replaced.features.get(i, j);
                if covered.contains(&i) && patterns[0].feature_idx.contains(&j) {
                    assert_eq!(new, 0.0);
                } else {
                    assert_eq!(new.to_bits(), original.to_bits(), "entry ({i},{j}) changed");
                }
            }
        }
        // Zeros policy is idempotent.
        let twice = apply_replacement(&replaced, &patterns[0]).unwrap();
        assert_eq!(twice, replaced);
    }

    #[test]
    fn idx_image_fixture_parses() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend(0u8..8);
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.dims, vec![2, 2, 2]);
        match parsed.data {
            IdxData::Images(px) => {
                assert_eq!(px.len(), 8);
                assert_eq!(px[0], 0.0);
                assert!((px[7] - 7.0 / 255.0).abs() < 1e-15);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn idx_label_fixture_parses() {
        let bytes = vec![0, 0, 8, 1, 0, 0, 0, 3, 5, 0, 9];
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.dims, vec![3]);
        assert_eq!(parsed.data, IdxData::Labels(vec![5, 0, 9]));
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        assert!(matches!(
            parse_idx(&[0, 0, 8, 9, 0, 0, 0, 1, 7]),
            Err(DataError::BadMagic { found: 0x0809 })
        ));
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 5, 1, 2]),
            Err(DataError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn mnist_labels_if_present_locally() {
        // Optional check against the official train-labels file.
        let candidates = [
            "/root/data/mnist/train-labels-idx1-ubyte",
            "train-labels-idx1-ubyte",
        ];
        let Some(bytes) = candidates.iter().find_map(|p| std::fs::read(p).ok()) else {
            eprintln!("mnist labels not present; skipping");
            return;
        };
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.dims, vec![60_000]);
        if let IdxData::Labels(labels) = parsed.data {
            let ones = labels.iter().filter(|&&l| l == 1).count();
            assert_eq!(ones, 6742);
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let cfg = SynthConfig { num_samples: 10, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let (a, b) = split_random(&train, 0.5, 99).unwrap();
        assert_eq!(a.n(), 5);
        assert_eq!(b.n(), 5);
        let (a2, b2) = split_random(&train, 0.5, 99).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        // Disjoint and exhaustive: row multisets partition the original.
        let mut seen: Vec<Vec<u64>> = Vec::new();
        for ds in [&a, &b] {
            for i in 0..ds.n() {
                seen.push(ds.features.row(i).iter().map(|v| v.to_bits()).collect());
            }
        }
        seen.sort();
        let mut original: Vec<Vec<u64>> = (0..train.n())
            .map(|i| train.features.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        original.sort();
        assert_eq!(seen, original);
    }

    #[test]
    fn budget_is_enforced() {
        let cfg = SynthConfig { num_samples: 100, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        // 4 bias features of 12 total = 33%: fits in 0.4, not in 0.1.
        let patterns =
            build_pattern_points(&train, &cfg.bias_block(), &[0, 1, 2, 3], ReplacementPolicy::Zeros)
                .unwrap();
        assert!(UnlearnRequest::systematic(patterns.clone(), 0.4, &train).is_ok());
        assert!(matches!(
            UnlearnRequest::systematic(patterns, 0.1, &train),
            Err(DataError::BudgetExceeded { .. })
        ));
        assert!(UnlearnRequest::random_points((0..10).collect(), 0.1, &train).is_ok());
        assert!(matches!(
            UnlearnRequest::random_points((0..11).collect(), 0.1, &train),
            Err(DataError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn csv_export_shape() {
        let cfg = SynthConfig { num_samples: 3, core_dim: 2, bias_dim: 1, ..Default::default() };
        let (train, _, _) = generate_biased(&cfg).unwrap();
        let mut buf = Vec::new();
        train.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "feature_0,feature_1,feature_2,label,bias_attr");
        assert_eq!(lines[1].split(',').count(), 5);
    }
}
