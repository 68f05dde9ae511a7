//! Experiment orchestration: per-trial generate → train → unlearn →
//! evaluate, with the retrain oracle always computed for RIP, plus the
//! iteration-sweep trace.
//!
//! Trial `i` derives all randomness from `run.seed + i`: sub-streams for
//! data generation, training, the unlearning engine, forget-set selection,
//! and membership-inference sampling are split deterministically, so a
//! config + seed pins every output byte except wall-clock timings.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;
use uib_core::bounds::BoundEstimate;
use uib_core::data::{
    apply_replacement, build_pattern_points, generate_biased, DataError, Dataset, RequestMode,
    UnlearnRequest,
};
use uib_core::metrics::{self, MetricsError, MetricsRecord};
use uib_core::model::{self, Batch, ModelError, ModelSpec, ParamVector, TrainConfig};
use uib_core::numerics::Prng;
use uib_core::unlearn::{self, UnlearnError, UnlearnResult};

use crate::config::{
    ConfigError, ExperimentConfig, FeatureSelector, LabelSelector, Method, RequestKind,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn sub_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_mul(1000).wrapping_add(stream)
}

/// Everything produced by one trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialOutput {
    pub trial: usize,
    pub seed: u64,
    pub metrics: MetricsRecord,
    pub bounds: BoundEstimate,
    pub params_digest: String,
    pub wall_time_seconds: f64,
    pub rng_algorithm: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_iteration: Option<Vec<unlearn::IterationRecord>>,
}

/// Dataset triple for one trial.
pub struct TrialData {
    pub train: Dataset,
    pub test_biased: Dataset,
    pub test_uniform: Dataset,
}

pub fn build_trial_data(cfg: &ExperimentConfig, data_seed: u64) -> Result<TrialData, PipelineError> {
    let mut synth = cfg.synth.clone();
    synth.seed = data_seed;
    let (train, test_biased, test_uniform) = generate_biased(&synth)?;
    Ok(TrialData { train, test_biased, test_uniform })
}

/// Resolve the request descriptor against a concrete dataset. Returns the
/// request plus the forget rows (train row ids whose original values are the
/// unlearning target).
pub fn build_request(
    cfg: &ExperimentConfig,
    train: &Dataset,
    forget_seed: u64,
) -> Result<(UnlearnRequest, Vec<usize>), PipelineError> {
    match cfg.request.kind {
        RequestKind::Systematic => {
            let features = match &cfg.request.features {
                FeatureSelector::BiasBlock => cfg.synth.bias_block(),
                FeatureSelector::Explicit(idx) => idx.clone(),
            };
            let labels = match &cfg.request.labels {
                LabelSelector::All => (0..cfg.synth.num_classes).collect(),
                LabelSelector::Explicit(ls) => ls.clone(),
            };
            let mut patterns = Vec::new();
            for &label in &labels {
                patterns.extend(build_pattern_points(
                    train,
                    &features,
                    &[label],
                    cfg.request.replacement,
                )?);
            }
            let mut forget: BTreeSet<usize> = BTreeSet::new();
            for p in &patterns {
                forget.extend(p.sample_ids.iter().copied());
            }
            let request = UnlearnRequest::systematic(patterns, cfg.request.budget_fraction, train)?;
            Ok((request, forget.into_iter().collect()))
        }
        RequestKind::Random => {
            let k = ((cfg.request.points_fraction * train.n() as f64).floor() as usize).max(1);
            let mut order: Vec<usize> = (0..train.n()).collect();
            let mut rng = Prng::new(forget_seed);
            rng.shuffle(&mut order);
            let mut ids: Vec<usize> = order[..k].to_vec();
            ids.sort_unstable();
            let request =
                UnlearnRequest::random_points(ids.clone(), cfg.request.budget_fraction, train)?;
            Ok((request, ids))
        }
    }
}

/// The remaining dataset `D \ ΔD`: features replaced for pattern requests,
/// rows removed for random-point requests.
pub fn remaining_dataset(train: &Dataset, request: &UnlearnRequest) -> Result<Dataset, PipelineError> {
    match &request.mode {
        RequestMode::SystematicPatterns(patterns) => {
            let mut out = train.clone();
            for p in patterns {
                out = apply_replacement(&out, p)?;
            }
            Ok(out)
        }
        RequestMode::RandomPoints(ids) => {
            let remove: BTreeSet<usize> = ids.iter().copied().collect();
            Ok(train.without_rows(&remove)?)
        }
    }
}

struct MethodRun {
    params: ParamVector,
    ut_seconds: f64,
    result: Option<UnlearnResult>,
}

#[allow(clippy::too_many_arguments)]
fn execute_method(
    cfg: &ExperimentConfig,
    spec: &ModelSpec,
    params0: &ParamVector,
    data: &TrialData,
    request: &UnlearnRequest,
    train_minus: &Dataset,
    forget_batch: &Batch,
    train_cfg: &TrainConfig,
    engine_seed: u64,
) -> Result<MethodRun, PipelineError> {
    let solver = cfg.solver_config();
    let uib_cfg = cfg.uib_config(spec.layer_count());
    match cfg.method.name {
        Method::Retrain => {
            let (run, ut) = metrics::measure_ut(|| unlearn::baseline_retrain(spec, train_minus, train_cfg));
            Ok(MethodRun { params: run?.params, ut_seconds: ut, result: None })
        }
        Method::Ft => {
            let mut ft_cfg = train_cfg.clone();
            ft_cfg.epochs = cfg.method.ft_epochs;
            let (run, ut) =
                metrics::measure_ut(|| unlearn::baseline_fine_tune(spec, params0, train_minus, &ft_cfg));
            Ok(MethodRun { params: run?.params, ut_seconds: ut, result: None })
        }
        Method::Ga => {
            let (params, ut) = metrics::measure_ut(|| {
                unlearn::baseline_gradient_ascent(
                    spec,
                    params0,
                    forget_batch,
                    cfg.method.ga_steps,
                    cfg.method.ga_learning_rate,
                )
            });
            Ok(MethodRun { params: params?, ut_seconds: ut, result: None })
        }
        Method::Sr => {
            let mut rng = Prng::new(engine_seed);
            let batch = train_minus.to_batch();
            let (params, ut) = metrics::measure_ut(|| {
                unlearn::baseline_fisher_scrub(spec, params0, &batch, cfg.method.sr_noise_scale, &mut rng)
            });
            Ok(MethodRun { params: params?, ut_seconds: ut, result: None })
        }
        Method::If | Method::UibIf => {
            let engine_cfg = if cfg.method.name == Method::If {
                // Plain influence unlearning: one sweep, no sampling, no
                // regularizer step.
                let mut plain = uib_cfg.clone();
                plain.iterations = 1;
                plain.sampler = unlearn::SamplerKind::None;
                plain.reg_strength = 0.0;
                plain
            } else {
                uib_cfg.clone()
            };
            let mut rng = Prng::new(engine_seed);
            let (result, ut) = metrics::measure_ut(|| {
                unlearn::run_uib_if(spec, params0, &data.train, request, &engine_cfg, &solver, &mut rng)
            });
            let result = result?;
            Ok(MethodRun { params: result.params_after.clone(), ut_seconds: ut, result: Some(result) })
        }
    }
}

/// Deterministic sample of up to `cap` rows (without replacement).
fn sample_rows(n: usize, cap: usize, rng: &mut Prng) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut picked: Vec<usize> = order[..cap].to_vec();
    picked.sort_unstable();
    picked
}

/// Membership-inference evaluation sets are capped at 256 seeded samples
/// per side; power-of-two caps keep the reported percentages exact.
const MIA_SAMPLE_CAP: usize = 256;

/// Run one trial end to end.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialOutput, PipelineError> {
    let base = cfg.run.seed.wrapping_add(trial as u64);
    let data = build_trial_data(cfg, sub_seed(base, 1))?;
    let spec = cfg.model_spec()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = sub_seed(base, 2);

    let original = model::train_sgd(&spec, &data.train.to_batch(), &train_cfg)?;
    let (request, forget_rows) = build_request(cfg, &data.train, sub_seed(base, 4))?;
    let train_minus = remaining_dataset(&data.train, &request)?;

    // Retrain oracle: always computed, RIP is relative to it by definition.
    let retrain_oracle = unlearn::baseline_retrain(&spec, &train_minus, &train_cfg)?;

    let forget_batch = data.train.to_batch().select(&forget_rows);
    let run = execute_method(
        cfg,
        &spec,
        &original.params,
        &data,
        &request,
        &train_minus,
        &forget_batch,
        &train_cfg,
        sub_seed(base, 3),
    )?;

    // Predictive metrics on the uniform test split.
    let pred = model::predict_labels(&spec, &run.params, &data.test_uniform.features)?;
    let f1 = metrics::f1_macro(&pred, &data.test_uniform.labels, spec.num_classes)?.percent;
    let retr_pred = model::predict_labels(&spec, &retrain_oracle.params, &data.test_uniform.features)?;
    let f1_retrain =
        metrics::f1_macro(&retr_pred, &data.test_uniform.labels, spec.num_classes)?.percent;
    let rip = metrics::rip(f1, f1_retrain)?;
    let bias_attr = data.test_uniform.bias_attr.as_ref().expect("synthetic data has bias ids");
    let bias_corr = metrics::bias_correlation(&pred, bias_attr)?.v;

    // Membership inference: forget points (original values) against a
    // member/non-member calibration pair.
    let mut mia_rng = Prng::new(sub_seed(base, 5));
    let forget_eval_rows = sample_rows(forget_rows.len(), MIA_SAMPLE_CAP, &mut mia_rng);
    let forget_eval = forget_batch.select(&forget_eval_rows);
    let member_rows = sample_rows(train_minus.n(), MIA_SAMPLE_CAP, &mut mia_rng);
    let calib_member = train_minus.to_batch().select(&member_rows);
    let nonmember_rows = sample_rows(data.test_uniform.n(), MIA_SAMPLE_CAP, &mut mia_rng);
    let calib_nonmember = data.test_uniform.to_batch().select(&nonmember_rows);
    let member_rate =
        metrics::mia_member_rate(&spec, &run.params, &forget_eval, &calib_member, &calib_nonmember)?;

    let record = MetricsRecord {
        f1_percent: f1,
        rip_percent: rip,
        mia_member_rate_percent: member_rate,
        mia_efficacy_paper_percent: metrics::mia_efficacy_paper(member_rate),
        bias_correlation: bias_corr,
        ut_seconds: run.ut_seconds,
    };

    let uib_cfg = cfg.uib_config(spec.layer_count());
    let remaining_batch = train_minus.to_batch();
    let bounds = match &run.result {
        Some(result) => unlearn::bound_estimate(&spec, result, &remaining_batch, &uib_cfg)?,
        None => {
            let layers = spec.layer_count();
            let lower_y = uib_core::bounds::lower_bound_y(&spec, &run.params, &remaining_batch)
                .map_err(UnlearnError::from)?;
            BoundEstimate::new(
                vec![0.0; layers],
                vec![0.0; layers],
                &uib_cfg.s_theta,
                &uib_cfg.s_r,
                lower_y,
                uib_cfg.beta,
            )
            .map_err(UnlearnError::from)?
        }
    };

    Ok(TrialOutput {
        trial,
        seed: base,
        metrics: record,
        bounds,
        params_digest: run.params.digest(),
        wall_time_seconds: run.ut_seconds,
        rng_algorithm: uib_core::numerics::PRNG_ALGORITHM.to_string(),
        per_iteration: run.result.map(|r| r.per_iteration),
    })
}

/// All trials; individual failures are recorded and the run continues.
pub fn run_experiment(
    cfg: &ExperimentConfig,
) -> Result<Vec<Result<TrialOutput, String>>, PipelineError> {
    let mut outputs = Vec::with_capacity(cfg.run.trials);
    let mut failures = 0;
    for trial in 0..cfg.run.trials {
        match run_trial(cfg, trial) {
            Ok(out) => outputs.push(Ok(out)),
            Err(err) => {
                failures += 1;
                outputs.push(Err(err.to_string()));
            }
        }
    }
    if failures == cfg.run.trials {
        return Err(PipelineError::AllTrialsFailed(failures));
    }
    Ok(outputs)
}

/// One row of the iteration-sweep trace.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub bias_correlation: f64,
    pub f1: f64,
    pub uib_upper_total: f64,
    pub lower_y: f64,
}

/// Run trial 0 once per sweep entry with `uib.iterations` overridden,
/// evaluating the full metric set each time.
pub fn run_trace(cfg: &ExperimentConfig) -> Result<Vec<TraceRow>, PipelineError> {
    let mut rows = Vec::new();
    for &iterations in &cfg.trace_iterations {
        let mut swept = cfg.clone();
        swept.uib.iterations = iterations;
        if !matches!(swept.method.name, Method::If | Method::UibIf) {
            swept.method.name = Method::UibIf;
        }
        let out = run_trial(&swept, 0)?;
        rows.push(TraceRow {
            iteration: iterations,
            bias_correlation: out.metrics.bias_correlation,
            f1: out.metrics.f1_percent,
            uib_upper_total: out.bounds.upper_total,
            lower_y: out.bounds.lower_y,
        });
    }
    Ok(rows)
}
