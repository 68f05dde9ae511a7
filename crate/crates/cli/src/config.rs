//! Experiment configuration: a small sectioned key-value format.
//!
//! ```text
//! # comment
//! [synth]
//! num_samples = 2000
//! [uib]
//! beta = 0.1
//! ```
//!
//! Sections are flat, keys are `key = value` lines, `#` starts a comment
//! (whole-line or trailing). Unknown sections and keys are rejected with
//! their line number. Missing keys take the documented defaults.
//! [`serialize_config`] emits the normalized form: every key, fixed order,
//! shortest round-trip float formatting.

use std::fmt::Write as _;

use thiserror::Error;
use uib_core::data::{ReplacementPolicy, SynthConfig};
use uib_core::model::{Architecture, ModelSpec, TrainConfig};
use uib_core::unlearn::{CgConfig, LissaConfig, SamplerKind, SolverConfig, UibConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for {field}: {message}")]
    Validation { field: &'static str, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Retrain,
    Ft,
    Ga,
    Sr,
    If,
    UibIf,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Ft => "ft",
            Method::Ga => "ga",
            Method::Sr => "sr",
            Method::If => "if",
            Method::UibIf => "uib_if",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "retrain" => Method::Retrain,
            "ft" => Method::Ft,
            "ga" => Method::Ga,
            "sr" => Method::Sr,
            "if" => Method::If,
            "uib_if" => Method::UibIf,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSelector {
    BiasBlock,
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LabelSelector {
    All,
    Explicit(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestKind {
    Systematic,
    Random,
}

/// Unlearn-request descriptor; resolved against the generated dataset by
/// the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestConfig {
    pub kind: RequestKind,
    pub budget_fraction: f64,
    pub features: FeatureSelector,
    pub labels: LabelSelector,
    pub replacement: ReplacementPolicy,
    /// Random mode: fraction of training rows to forget.
    pub points_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub name: Method,
    pub ft_epochs: usize,
    pub ga_steps: usize,
    pub ga_learning_rate: f64,
    pub sr_noise_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub l2_strength: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverSection {
    pub kind: SolverChoice,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub lissa_depth: usize,
    /// Unset: 10 for LogReg, 25 for the MLP (its Hessian runs larger).
    pub lissa_scale: Option<f64>,
    pub lissa_repeats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverChoice {
    Cg,
    Lissa,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub trials: usize,
    pub seed: u64,
    pub output_dir: String,
}

/// The uib section before layer-set resolution (s_theta/s_r defaults need
/// the model's layer count).
#[derive(Clone, Debug, PartialEq)]
pub struct UibSection {
    pub beta: f64,
    pub reg_strength: f64,
    pub threshold: f64,
    pub samples_k: usize,
    pub iterations: usize,
    pub sampler: SamplerKind,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub s_theta: Option<Vec<usize>>,
    pub s_r: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub request: RequestConfig,
    pub method: MethodConfig,
    pub uib: UibSection,
    pub solver: SolverSection,
    pub run: RunConfig,
    pub trace_iterations: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            model: ModelConfig { architecture: Architecture::LogReg, l2_strength: 0.1 },
            train: TrainConfig { epochs: 60, batch_size: 256, learning_rate: 0.2, seed: 7 },
            request: RequestConfig {
                kind: RequestKind::Systematic,
                budget_fraction: 0.4,
                features: FeatureSelector::BiasBlock,
                labels: LabelSelector::All,
                replacement: ReplacementPolicy::Zeros,
                points_fraction: 0.1,
            },
            method: MethodConfig {
                name: Method::UibIf,
                ft_epochs: 10,
                ga_steps: 25,
                ga_learning_rate: 0.01,
                sr_noise_scale: 0.05,
            },
            uib: UibSection {
                beta: 0.1,
                reg_strength: 0.0,
                threshold: 0.1,
                samples_k: 32,
                iterations: 4,
                sampler: SamplerKind::None,
                sigma_p: 0.1,
                sigma_q: 1.0,
                s_theta: None,
                s_r: None,
            },
            solver: SolverSection {
                kind: SolverChoice::Cg,
                damping: 0.01,
                tol: 1e-8,
                max_iter: 500,
                lissa_depth: 400,
                lissa_scale: None,
                lissa_repeats: 1,
            },
            run: RunConfig { trials: 10, seed: 7, output_dir: "out".to_string() },
            trace_iterations: vec![1, 2, 4, 8],
        }
    }
}

impl ExperimentConfig {
    /// Model spec resolved against the synthetic data dimensions.
    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let spec = ModelSpec {
            architecture: self.model.architecture.clone(),
            input_dim: self.synth.total_dim(),
            num_classes: self.synth.num_classes,
            l2_strength: self.model.l2_strength,
        };
        spec.validate().map_err(|e| ConfigError::Validation {
            field: "model",
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    /// UIB config with layer sets resolved against the model's layer count.
    pub fn uib_config(&self, num_layers: usize) -> UibConfig {
        let defaults = UibConfig::defaults_for_layers(num_layers);
        UibConfig {
            beta: self.uib.beta,
            reg_strength: self.uib.reg_strength,
            threshold: self.uib.threshold,
            samples_k: self.uib.samples_k,
            iterations: self.uib.iterations,
            sampler: self.uib.sampler,
            sigma_p: self.uib.sigma_p,
            sigma_q: self.uib.sigma_q,
            s_theta: self.uib.s_theta.clone().unwrap_or(defaults.s_theta),
            s_r: self.uib.s_r.clone().unwrap_or(defaults.s_r),
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        match self.solver.kind {
            SolverChoice::Cg => SolverConfig::Cg(CgConfig {
                damping: self.solver.damping,
                tol: self.solver.tol,
                max_iter: self.solver.max_iter,
            }),
            SolverChoice::Lissa => SolverConfig::Lissa(LissaConfig {
                depth: self.solver.lissa_depth,
                damping: self.solver.damping,
                scale: self.solver.lissa_scale.unwrap_or(match self.model.architecture {
                    Architecture::LogReg => 10.0,
                    Architecture::Mlp { .. } => 25.0,
                }),
                repeats: self.solver.lissa_repeats,
                tol: self.solver.tol,
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &'static str, message: String| ConfigError::Validation { field, message };
        self.synth
            .validate()
            .map_err(|e| invalid("synth", e.to_string()))?;
        self.model_spec()?;
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        if !(self.request.budget_fraction > 0.0 && self.request.budget_fraction <= 1.0) {
            return Err(invalid(
                "request.budget_fraction",
                format!("must be in (0, 1], got {}", self.request.budget_fraction),
            ));
        }
        if !(self.request.points_fraction > 0.0 && self.request.points_fraction <= 1.0) {
            return Err(invalid(
                "request.points_fraction",
                format!("must be in (0, 1], got {}", self.request.points_fraction),
            ));
        }
        if let FeatureSelector::Explicit(idx) = &self.request.features {
            for &k in idx {
                if k >= self.synth.total_dim() {
                    return Err(invalid(
                        "request.features",
                        format!("feature {k} out of range for {} dims", self.synth.total_dim()),
                    ));
                }
            }
        }
        if let LabelSelector::Explicit(ls) = &self.request.labels {
            for &l in ls {
                if l >= self.synth.num_classes {
                    return Err(invalid(
                        "request.labels",
                        format!("label {l} out of range for {} classes", self.synth.num_classes),
                    ));
                }
            }
        }
        let spec = self.model_spec()?;
        self.uib_config(spec.layer_count())
            .validate(spec.layer_count())
            .map_err(|e| invalid("uib", e.to_string()))?;
        if !(self.solver.damping >= 0.0) {
            return Err(invalid("solver.damping", "must be >= 0".into()));
        }
        if !(self.solver.tol > 0.0) {
            return Err(invalid("solver.tol", "must be > 0".into()));
        }
        if self.run.trials < 1 {
            return Err(invalid("run.trials", "must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Option<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().ok())
        .collect()
}

/// Parse the documented config text; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: format!("malformed section header `{raw}`"),
            })?;
            let name = name.trim();
            if !matches!(
                name,
                "synth" | "model" | "train" | "request" | "method" | "uib" | "solver" | "run" | "trace"
            ) {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown section `{name}`"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
            line: line_no,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        let parse_err = |message: String| ConfigError::Parse { line: line_no, message };
        macro_rules! num {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| parse_err(format!("cannot parse `{value}` for `{key}`")))?
            };
        }
        match (section.as_str(), key) {
            ("synth", "num_samples") => cfg.synth.num_samples = num!(usize),
            ("synth", "num_classes") => cfg.synth.num_classes = num!(usize),
            ("synth", "core_dim") => cfg.synth.core_dim = num!(usize),
            ("synth", "bias_dim") => cfg.synth.bias_dim = num!(usize),
            ("synth", "bias_strength") => cfg.synth.bias_strength = num!(f64),
            ("synth", "class_separation") => cfg.synth.class_separation = num!(f64),
            ("synth", "seed") => cfg.synth.seed = num!(u64),
            ("model", "architecture") => match value {
                "logreg" => cfg.model.architecture = Architecture::LogReg,
                "mlp" => {
                    let hidden = match &cfg.model.architecture {
                        Architecture::Mlp { hidden_width, .. } => *hidden_width,
                        _ => 16,
                    };
                    cfg.model.architecture = Architecture::Mlp {
                        hidden_width: hidden,
                        activation: uib_core::model::Activation::Tanh,
                    };
                }
                other => return Err(parse_err(format!("unknown architecture `{other}`"))),
            },
            ("model", "hidden_width") => {
                let w = num!(usize);
                if let Architecture::Mlp { hidden_width, .. } = &mut cfg.model.architecture {
                    *hidden_width = w;
                } else {
                    cfg.model.architecture = Architecture::Mlp {
                        hidden_width: w,
                        activation: uib_core::model::Activation::Tanh,
                    };
                    // hidden_width before architecture=mlp implies an MLP,
                    // but architecture=logreg later overrides it.
                }
            }
            ("model", "l2_strength") => cfg.model.l2_strength = num!(f64),
            ("train", "epochs") => cfg.train.epochs = num!(usize),
            ("train", "batch_size") => cfg.train.batch_size = num!(usize),
            ("train", "learning_rate") => cfg.train.learning_rate = num!(f64),
            ("request", "mode") => match value {
                "systematic" => cfg.request.kind = RequestKind::Systematic,
                "random" => cfg.request.kind = RequestKind::Random,
                other => return Err(parse_err(format!("unknown request mode `{other}`"))),
            },
            ("request", "budget_fraction") => cfg.request.budget_fraction = num!(f64),
            ("request", "features") => {
                cfg.request.features = if value == "bias-block" {
                    FeatureSelector::BiasBlock
                } else {
                    FeatureSelector::Explicit(parse_list(value).ok_or_else(|| {
                        parse_err(format!("cannot parse feature list `{value}`"))
                    })?)
                }
            }
            ("request", "labels") => {
                cfg.request.labels = if value == "all" {
                    LabelSelector::All
                } else {
                    LabelSelector::Explicit(parse_list(value).ok_or_else(|| {
                        parse_err(format!("cannot parse label list `{value}`"))
                    })?)
                }
            }
            ("request", "replacement") => match value {
                "zeros" => cfg.request.replacement = ReplacementPolicy::Zeros,
                "feature-mean" => cfg.request.replacement = ReplacementPolicy::FeatureMean,
                other => return Err(parse_err(format!("unknown replacement policy `{other}`"))),
            },
            ("request", "points_fraction") => cfg.request.points_fraction = num!(f64),
            ("method", "name") => {
                cfg.method.name = Method::parse(value)
                    .ok_or_else(|| parse_err(format!("unknown method `{value}`")))?
            }
            ("method", "ft_epochs") => cfg.method.ft_epochs = num!(usize),
            ("method", "ga_steps") => cfg.method.ga_steps = num!(usize),
            ("method", "ga_learning_rate") => cfg.method.ga_learning_rate = num!(f64),
            ("method", "sr_noise_scale") => cfg.method.sr_noise_scale = num!(f64),
            ("uib", "beta") => cfg.uib.beta = num!(f64),
            ("uib", "reg_strength") => cfg.uib.reg_strength = num!(f64),
            ("uib", "threshold") => cfg.uib.threshold = num!(f64),
            ("uib", "samples_k") => cfg.uib.samples_k = num!(usize),
            ("uib", "iterations") => cfg.uib.iterations = num!(usize),
            ("uib", "sampler") => match value {
                "categorical" => cfg.uib.sampler = SamplerKind::Categorical,
                "bernoulli" => cfg.uib.sampler = SamplerKind::Bernoulli,
                "none" => cfg.uib.sampler = SamplerKind::None,
                other => return Err(parse_err(format!("unknown sampler `{other}`"))),
            },
            ("uib", "sigma_p") => cfg.uib.sigma_p = num!(f64),
            ("uib", "sigma_q") => cfg.uib.sigma_q = num!(f64),
            ("uib", "s_theta") => {
                cfg.uib.s_theta = Some(parse_list(value).ok_or_else(|| {
                    parse_err(format!("cannot parse layer list `{value}`"))
                })?)
            }
            ("uib", "s_r") => {
                cfg.uib.s_r = Some(parse_list(value).ok_or_else(|| {
                    parse_err(format!("cannot parse layer list `{value}`"))
                })?)
            }
            ("solver", "kind") => match value {
                "cg" => cfg.solver.kind = SolverChoice::Cg,
                "lissa" => cfg.solver.kind = SolverChoice::Lissa,
                other => return Err(parse_err(format!("unknown solver `{other}`"))),
            },
            ("solver", "damping") => cfg.solver.damping = num!(f64),
            ("solver", "tol") => cfg.solver.tol = num!(f64),
            ("solver", "max_iter") => cfg.solver.max_iter = num!(usize),
            ("solver", "lissa_depth") => cfg.solver.lissa_depth = num!(usize),
            ("solver", "lissa_scale") => cfg.solver.lissa_scale = Some(num!(f64)),
            ("solver", "lissa_repeats") => cfg.solver.lissa_repeats = num!(usize),
            ("run", "trials") => cfg.run.trials = num!(usize),
            ("run", "seed") => cfg.run.seed = num!(u64),
            ("run", "output_dir") => cfg.run.output_dir = value.to_string(),
            ("trace", "iterations") => {
                cfg.trace_iterations = parse_list(value)
                    .ok_or_else(|| parse_err(format!("cannot parse iteration list `{value}`")))?
            }
            ("", key) => {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("key `{key}` before any [section]"),
                })
            }
            (section, key) => {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("unknown key `{key}` in section [{section}]"),
                })
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn list_str<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Emit the normalized config text: every key, fixed order.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let w = &mut s;
    writeln!(w, "[synth]").unwrap();
    writeln!(w, "num_samples = {}", cfg.synth.num_samples).unwrap();
    writeln!(w, "num_classes = {}", cfg.synth.num_classes).unwrap();
    writeln!(w, "core_dim = {}", cfg.synth.core_dim).unwrap();
    writeln!(w, "bias_dim = {}", cfg.synth.bias_dim).unwrap();
    writeln!(w, "bias_strength = {}", cfg.synth.bias_strength).unwrap();
    writeln!(w, "class_separation = {}", cfg.synth.class_separation).unwrap();
    writeln!(w, "seed = {}", cfg.synth.seed).unwrap();
    writeln!(w, "\n[model]").unwrap();
    match &cfg.model.architecture {
        Architecture::LogReg => writeln!(w, "architecture = logreg").unwrap(),
        Architecture::Mlp { hidden_width, .. } => {
            writeln!(w, "architecture = mlp").unwrap();
            writeln!(w, "hidden_width = {hidden_width}").unwrap();
        }
    }
    writeln!(w, "l2_strength = {}", cfg.model.l2_strength).unwrap();
    writeln!(w, "\n[train]").unwrap();
    writeln!(w, "epochs = {}", cfg.train.epochs).unwrap();
    writeln!(w, "batch_size = {}", cfg.train.batch_size).unwrap();
    writeln!(w, "learning_rate = {}", cfg.train.learning_rate).unwrap();
    writeln!(w, "\n[request]").unwrap();
    let mode = match cfg.request.kind {
        RequestKind::Systematic => "systematic",
        RequestKind::Random => "random",
    };
    writeln!(w, "mode = {mode}").unwrap();
    writeln!(w, "budget_fraction = {}", cfg.request.budget_fraction).unwrap();
    match &cfg.request.features {
        FeatureSelector::BiasBlock => writeln!(w, "features = bias-block").unwrap(),
        FeatureSelector::Explicit(idx) => writeln!(w, "features = {}", list_str(idx)).unwrap(),
    }
    match &cfg.request.labels {
        LabelSelector::All => writeln!(w, "labels = all").unwrap(),
        LabelSelector::Explicit(ls) => writeln!(w, "labels = {}", list_str(ls)).unwrap(),
    }
    let repl = match cfg.request.replacement {
        ReplacementPolicy::Zeros => "zeros",
        ReplacementPolicy::FeatureMean => "feature-mean",
    };
    writeln!(w, "replacement = {repl}").unwrap();
    writeln!(w, "points_fraction = {}", cfg.request.points_fraction).unwrap();
    writeln!(w, "\n[method]").unwrap();
    writeln!(w, "name = {}", cfg.method.name.name()).unwrap();
    writeln!(w, "ft_epochs = {}", cfg.method.ft_epochs).unwrap();
    writeln!(w, "ga_steps = {}", cfg.method.ga_steps).unwrap();
    writeln!(w, "ga_learning_rate = {}", cfg.method.ga_learning_rate).unwrap();
    writeln!(w, "sr_noise_scale = {}", cfg.method.sr_noise_scale).unwrap();
    writeln!(w, "\n[uib]").unwrap();
    writeln!(w, "beta = {}", cfg.uib.beta).unwrap();
    writeln!(w, "reg_strength = {}", cfg.uib.reg_strength).unwrap();
    writeln!(w, "threshold = {}", cfg.uib.threshold).unwrap();
    writeln!(w, "samples_k = {}", cfg.uib.samples_k).unwrap();
    writeln!(w, "iterations = {}", cfg.uib.iterations).unwrap();
    let sampler = match cfg.uib.sampler {
        SamplerKind::Categorical => "categorical",
        SamplerKind::Bernoulli => "bernoulli",
        SamplerKind::None => "none",
    };
    writeln!(w, "sampler = {sampler}").unwrap();
    writeln!(w, "sigma_p = {}", cfg.uib.sigma_p).unwrap();
    writeln!(w, "sigma_q = {}", cfg.uib.sigma_q).unwrap();
    if let Some(s_theta) = &cfg.uib.s_theta {
        writeln!(w, "s_theta = {}", list_str(s_theta)).unwrap();
    }
    if let Some(s_r) = &cfg.uib.s_r {
        writeln!(w, "s_r = {}", list_str(s_r)).unwrap();
    }
    writeln!(w, "\n[solver]").unwrap();
    let kind = match cfg.solver.kind {
        SolverChoice::Cg => "cg",
        SolverChoice::Lissa => "lissa",
    };
    writeln!(w, "kind = {kind}").unwrap();
    writeln!(w, "damping = {}", cfg.solver.damping).unwrap();
    writeln!(w, "tol = {}", cfg.solver.tol).unwrap();
    writeln!(w, "max_iter = {}", cfg.solver.max_iter).unwrap();
    writeln!(w, "lissa_depth = {}", cfg.solver.lissa_depth).unwrap();
    if let Some(scale) = cfg.solver.lissa_scale {
        writeln!(w, "lissa_scale = {scale}").unwrap();
    }
    writeln!(w, "lissa_repeats = {}", cfg.solver.lissa_repeats).unwrap();
    writeln!(w, "\n[run]").unwrap();
    writeln!(w, "trials = {}", cfg.run.trials).unwrap();
    writeln!(w, "seed = {}", cfg.run.seed).unwrap();
    writeln!(w, "output_dir = {}", cfg.run.output_dir).unwrap();
    writeln!(w, "\n[trace]").unwrap();
    writeln!(w, "iterations = {}", list_str(&cfg.trace_iterations)).unwrap();
    s
}
