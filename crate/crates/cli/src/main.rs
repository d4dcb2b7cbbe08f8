//! Scenario runner: list the scenario library, run one scenario and write
//! its dashboard artifacts, sweep a parameter, check the three system-level
//! predictions, or re-export a run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use tokenomy::scenarios::{
    self, config, export_dashboard, prediction_suite, read_dashboard_json, render_evidence,
    ExportFormat, RunReport,
};

#[derive(Parser)]
#[command(
    name = "tokenomy",
    about = "Marginal token allocation economy: scenarios, diagnostics, and dashboards",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List registered scenarios.
    List,
    /// Run one scenario and write its artifacts.
    Run {
        /// Scenario name (see `list`).
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for dashboard.csv, records.jsonl, audit.jsonl,
        /// metrics.json, and config.toml.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario once per value of a swept parameter.
    Sweep {
        name: String,
        /// Dotted config path with comma-separated values,
        /// e.g. agent.tau_v=60,120,240
        #[arg(long)]
        param: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the three empirical predictions.
    Predict {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-export a run directory's records in the requested format.
    Dashboard {
        run_dir: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::List => list(),
        Command::Run { name, seed, out } => run(&name, seed, out.as_deref()),
        Command::Sweep {
            name,
            param,
            seed,
            out,
        } => sweep(&name, &param, seed, out.as_deref()),
        Command::Predict { seed } => predict(seed),
        Command::Dashboard { run_dir, format } => dashboard(&run_dir, &format),
    }
}

fn list() -> Result<()> {
    let (_, scenario_list) = config::load_registry()?;
    for s in &scenario_list {
        println!("{:<20} {}", s.name, s.description);
    }
    Ok(())
}

fn write_report(report: &RunReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    scenarios::write_dashboard(
        &out.join("dashboard.csv"),
        &report.records,
        ExportFormat::Csv,
    )?;
    scenarios::write_dashboard(
        &out.join("records.jsonl"),
        &report.records,
        ExportFormat::Json,
    )?;
    fs::write(out.join("audit.jsonl"), render_evidence(&report.evidence))?;
    fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&report.metrics)?,
    )?;
    fs::write(out.join("config.toml"), &report.config_echo)?;
    Ok(())
}

fn summarize(report: &RunReport) {
    println!(
        "{} seed {}: {} requests, mean regret {:.4}, none-share {:.3}",
        report.scenario,
        report.seed,
        report.records.len(),
        report.metrics.routing.mean_regret,
        report.metrics.none_share,
    );
    for (label, count) in &report.metrics.diagnosis_counts {
        println!("  {label:<22} {count}");
    }
    println!("  schedule: {}", report.schedule);
}

fn run(name: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let report = scenarios::run_scenario(name, seed)?;
    summarize(&report);
    if let Some(dir) = out {
        write_report(&report, dir)?;
        println!("  wrote artifacts to {}", dir.display());
    }
    Ok(())
}

fn sweep(name: &str, param: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    let (path, raw_values) = param
        .split_once('=')
        .context("--param must look like path.to.key=v1,v2,...")?;
    let (base, scenario_list) = config::load_registry()?;
    let scenario = config::find_scenario(&scenario_list, name)?;
    println!(
        "{:<14} {:>10} {:>14} {:>12} {:>12}",
        "value", "requests", "mean_regret", "short_p95", "none_share"
    );
    for raw in raw_values.split(',') {
        let value = config::parse_override_value(path, raw)?;
        let overrides = vec![(path.to_string(), value)];
        let resolved = config::resolve_config(&base, scenario, &overrides)?;
        let report = scenarios::run_resolved(scenario, &resolved, seed)?;
        let short_p95 = report
            .metrics
            .serving
            .tenant_p95
            .get("short")
            .copied()
            .unwrap_or(f64::NAN);
        println!(
            "{raw:<14} {:>10} {:>14.4} {:>12.4} {:>12.3}",
            report.records.len(),
            report.metrics.routing.mean_regret,
            short_p95,
            report.metrics.none_share,
        );
        if let Some(dir) = out {
            write_report(&report, &dir.join(format!("{path}={raw}")))?;
        }
    }
    Ok(())
}

fn predict(seed: u64) -> Result<()> {
    let results = prediction_suite(seed)?;
    let mut all_pass = true;
    for r in &results {
        println!(
            "prediction {}: {} [{}] {}",
            r.id,
            r.name,
            if r.pass { "PASS" } else { "FAIL" },
            r.details
        );
        all_pass &= r.pass;
    }
    if !all_pass {
        bail!("one or more predictions failed");
    }
    Ok(())
}

fn dashboard(run_dir: &Path, format: &str) -> Result<()> {
    let format = ExportFormat::parse(format)
        .with_context(|| format!("unknown format `{format}`; use csv or json"))?;
    let records_path = run_dir.join("records.jsonl");
    let text = fs::read_to_string(&records_path)
        .with_context(|| format!("reading {}", records_path.display()))?;
    let records = read_dashboard_json(&text)?;
    print!("{}", export_dashboard(&records, format)?);
    Ok(())
}
