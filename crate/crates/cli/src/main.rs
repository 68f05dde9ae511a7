//! `uib` — bias/pattern unlearning experiments on synthetic biased data.
//!
//! Exit codes: 0 success, 1 usage error, 2 config/validation error,
//! 3 all trials failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uib_cli::config::{self, ExperimentConfig, Method};
use uib_cli::pipeline::{self, PipelineError};
use uib_cli::report;
use uib_core::model;
use uib_core::numerics::Prng;

#[derive(Parser)]
#[command(name = "uib", about = "Unlearning experiments: systematic patterns, biases, and random points", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment config file (sectioned key = value format).
    #[arg(long)]
    config: PathBuf,
    /// Override [run] seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override [method] name (retrain | ft | ga | sr | if | uib_if).
    #[arg(long)]
    method: Option<String>,
    /// Override [run] output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override [run] trials.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the three dataset splits as CSV files.
    GenerateData(CommonArgs),
    /// Train the original model and write a checkpoint.
    Train(CommonArgs),
    /// Run the configured unlearning method once and write the result JSON.
    Unlearn(CommonArgs),
    /// Run one full trial and print its metrics.
    Evaluate(CommonArgs),
    /// Run all trials; write per-trial JSONs and the aggregate CSV.
    Run(CommonArgs),
    /// Sweep [trace] iterations and write the iteration-trace CSV.
    Trace(CommonArgs),
}

fn load_config(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf), String> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("cannot read {}: {e}", args.config.display()))?;
    let mut cfg = config::parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(method) = &args.method {
        cfg.method.name = Method::parse(method).ok_or_else(|| format!("unknown method `{method}`"))?;
    }
    if let Some(out) = &args.out {
        cfg.run.output_dir = out.display().to_string();
    }
    if let Some(trials) = args.trials {
        cfg.run.trials = trials;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    let out_dir = PathBuf::from(&cfg.run.output_dir);
    Ok((cfg, out_dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    std::fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn generate_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), String> {
    let data = pipeline::build_trial_data(cfg, cfg.synth.seed).map_err(|e| e.to_string())?;
    for (name, ds) in [
        ("train.csv", &data.train),
        ("test_biased.csv", &data.test_biased),
        ("test_uniform.csv", &data.test_uniform),
    ] {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).map_err(|e| e.to_string())?;
        write_text(&out_dir.join(name), &String::from_utf8(buf).expect("ascii"))?;
    }
    println!("wrote train/test_biased/test_uniform CSVs to {}", out_dir.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), String> {
    let data = pipeline::build_trial_data(cfg, cfg.synth.seed).map_err(|e| e.to_string())?;
    let spec = cfg.model_spec().map_err(|e| e.to_string())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.run.seed;
    let run = model::train_sgd(&spec, &data.train.to_batch(), &train_cfg).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out_dir).map_err(|e| e.to_string())?;
    let path = out_dir.join("checkpoint.json");
    model::save_checkpoint(&path, &spec, &run.params, train_cfg.seed).map_err(|e| e.to_string())?;
    let mut trace = String::from("epoch,loss\n");
    for (epoch, loss) in run.epoch_losses.iter().enumerate() {
        trace.push_str(&format!("{epoch},{loss}\n"));
    }
    write_text(&out_dir.join("train_loss.csv"), &trace)?;
    println!(
        "trained {} epochs, final loss {:.6}; checkpoint at {}",
        run.epoch_losses.len(),
        run.epoch_losses.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    Ok(())
}

fn unlearn_once(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), String> {
    let data = pipeline::build_trial_data(cfg, cfg.synth.seed).map_err(|e| e.to_string())?;
    let spec = cfg.model_spec().map_err(|e| e.to_string())?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.run.seed;
    let original =
        model::train_sgd(&spec, &data.train.to_batch(), &train_cfg).map_err(|e| e.to_string())?;
    let (request, _) =
        pipeline::build_request(cfg, &data.train, cfg.run.seed).map_err(|e| e.to_string())?;
    let uib_cfg = cfg.uib_config(spec.layer_count());
    let solver = cfg.solver_config();
    let mut rng = Prng::new(cfg.run.seed);
    let result = uib_core::unlearn::run_uib_if(
        &spec,
        &original.params,
        &data.train,
        &request,
        &uib_cfg,
        &solver,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let json = serde_json::json!({
        "config": {
            "method": cfg.method.name.name(),
            "uib": uib_cfg,
            "solver": solver,
        },
        "result": result,
    });
    std::fs::create_dir_all(out_dir).map_err(|e| e.to_string())?;
    let path = out_dir.join("unlearn_result.json");
    write_text(&path, &serde_json::to_string_pretty(&json).expect("serializable"))?;
    println!(
        "unlearned in {:.3}s over {} recorded steps; result at {}",
        result.wall_time_seconds,
        result.per_iteration.len(),
        path.display()
    );
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), String> {
    let out = pipeline::run_trial(cfg, 0).map_err(|e| e.to_string())?;
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    write_text(&out_dir.join("evaluate.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn run_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), PipelineError> {
    let trials = pipeline::run_experiment(cfg)?;
    report::write_run_outputs(out_dir, &trials)?;
    let ok = trials.iter().filter(|t| t.is_ok()).count();
    println!(
        "{ok}/{} trials succeeded; outputs in {}",
        trials.len(),
        out_dir.display()
    );
    for (name, mean, std) in
        report::aggregate_rows(&trials.iter().filter_map(|t| t.as_ref().ok().cloned()).collect::<Vec<_>>())
    {
        println!("  {name}: {mean:.4} ± {std:.4}");
    }
    Ok(())
}

fn trace(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), String> {
    let rows = pipeline::run_trace(cfg).map_err(|e| e.to_string())?;
    let text = report::trace_csv(&rows);
    write_text(&out_dir.join("trace.csv"), &text)?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successful exits; real usage errors
            // exit 1 per the documented codes.
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let args = match &cli.command {
        Command::GenerateData(a)
        | Command::Train(a)
        | Command::Unlearn(a)
        | Command::Evaluate(a)
        | Command::Run(a)
        | Command::Trace(a) => a,
    };
    let (cfg, out_dir) = match load_config(args) {
        Ok(pair) => pair,
        Err(message) => {
            eprintln!("error: {message}");
            return ExitCode::from(2);
        }
    };
    let outcome: Result<(), String> = match &cli.command {
        Command::GenerateData(_) => generate_data(&cfg, &out_dir),
        Command::Train(_) => train(&cfg, &out_dir),
        Command::Unlearn(_) => unlearn_once(&cfg, &out_dir),
        Command::Evaluate(_) => evaluate(&cfg, &out_dir),
        Command::Trace(_) => trace(&cfg, &out_dir),
        Command::Run(_) => {
            return match run_all(&cfg, &out_dir) {
                Ok(()) => ExitCode::SUCCESS,
                Err(PipelineError::AllTrialsFailed(n)) => {
                    eprintln!("error: all {n} trials failed");
                    ExitCode::from(3)
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::from(2)
                }
            }
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}
