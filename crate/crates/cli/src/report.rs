//! Result files: per-trial JSON, the aggregate mean/std CSV, and the
//! iteration-trace CSV.
//!
//! Aggregate statistics are the mean and population standard deviation
//! (divide by n) over successful trials. Floats are written in shortest
//! round-trip form, so identical runs produce identical bytes; the
//! `ut_seconds` row is the only wall-clock-dependent content.

use std::fmt::Write as _;
use std::path::Path;

use crate::pipeline::{TraceRow, TrialOutput};

/// Fixed row order of the aggregate CSV.
pub const AGGREGATE_METRICS: [&str; 9] = [
    "f1_percent",
    "rip_percent",
    "mia_member_rate_percent",
    "mia_efficacy_paper_percent",
    "bias_correlation",
    "ut_seconds",
    "uib_upper_total",
    "lower_y",
    "objective",
];

fn metric_value(out: &TrialOutput, name: &str) -> f64 {
    match name {
        "f1_percent" => out.metrics.f1_percent,
        "rip_percent" => out.metrics.rip_percent,
        "mia_member_rate_percent" => out.metrics.mia_member_rate_percent,
        "mia_efficacy_paper_percent" => out.metrics.mia_efficacy_paper_percent,
        "bias_correlation" => out.metrics.bias_correlation,
        "ut_seconds" => out.metrics.ut_seconds,
        "uib_upper_total" => out.bounds.upper_total,
        "lower_y" => out.bounds.lower_y,
        "objective" => out.bounds.objective,
        other => unreachable!("unknown metric {other}"),
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(metric, mean, std)` rows over the successful trials.
pub fn aggregate_rows(trials: &[TrialOutput]) -> Vec<(String, f64, f64)> {
    AGGREGATE_METRICS
        .iter()
        .map(|&name| {
            let values: Vec<f64> = trials.iter().map(|t| metric_value(t, name)).collect();
            let (mean, std) = mean_std(&values);
            (name.to_string(), mean, std)
        })
        .collect()
}

pub fn aggregate_csv(rows: &[(String, f64, f64)]) -> String {
    let mut s = String::from("metric,mean,std\n");
    for (name, mean, std) in rows {
        writeln!(s, "{name},{mean},{std}").unwrap();
    }
    s
}

/// Plot-ready iteration trace: one row per swept iteration count.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("iteration,bias_correlation,f1,uib_upper_total,lower_y\n");
    for row in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            row.iteration, row.bias_correlation, row.f1, row.uib_upper_total, row.lower_y
        )
        .unwrap();
    }
    s
}

pub fn trial_file_name(trial: usize) -> String {
    format!("trial_{trial:03}.json")
}

/// Write per-trial JSONs (failures become `trial_XXX_error.json`) and the
/// aggregate CSV into `out_dir`.
pub fn write_run_outputs(
    out_dir: &Path,
    trials: &[Result<TrialOutput, String>],
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut ok = Vec::new();
    for (i, trial) in trials.iter().enumerate() {
        match trial {
            Ok(out) => {
                let text = serde_json::to_string_pretty(out).expect("serializable");
                std::fs::write(out_dir.join(trial_file_name(i)), text)?;
                ok.push(out.clone());
            }
            Err(message) => {
                let text = serde_json::json!({ "trial": i, "error": message }).to_string();
                std::fs::write(out_dir.join(format!("trial_{i:03}_error.json")), text)?;
            }
        }
    }
    let rows = aggregate_rows(&ok);
    std::fs::write(out_dir.join("aggregate.csv"), aggregate_csv(&rows))?;
    Ok(())
}
