//! `driverlens`: simulate a synthetic CGM cohort, train matched forecaster
//! pairs, and report how much the driver channels actually help.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driverlens_core::config::RunConfig;
use driverlens_core::report::{self, RunPaths};
use driverlens_core::{pipeline, plot, Result};

#[derive(Parser)]
#[command(name = "driverlens", version, about = "Driver-blindness benchmark for glucose forecasters")]
struct Cli {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker thread count override.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Fidelity preset override (clean, paper-C2, extreme).
    #[arg(long, global = true)]
    preset: Option<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the cohort and write the episode dataset plus manifest.
    Simulate,
    /// Train the matched pair; write delta, attribution and split reports.
    Bench,
    /// Re-run the bench across every configured fidelity preset.
    Sweep,
    /// Score both trained models on counterfactual dose probes.
    Probe,
    /// Render SVG plots from the reports already on disk.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_str_with_env("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(preset) = &cli.preset {
        cfg.preset = preset.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let paths = RunPaths::new(&cfg.out_dir);
    match cli.command {
        Cmd::Simulate => {
            let cohort = pipeline::build_cohort(&cfg)?;
            let manifest = report::write_dataset(&cfg, &paths, &cohort)?;
            println!(
                "wrote {} files under {} (data hash {})",
                manifest.files.len(),
                paths.episodes_dir().display(),
                manifest.data_hash
            );
        }
        Cmd::Bench => {
            let outputs = pipeline::run_bench(&cfg)?;
            report::write_bench_reports(&cfg, &paths, &outputs)?;
            println!("preset {} ({} loss):", cfg.preset, outputs.delta.loss.as_str());
            for row in &outputs.delta.rows {
                println!(
                    "  h={:3} min  delta {:+8.3} mg/dL ({:+6.2}%)  ci [{:+.3}, {:+.3}]  n={}",
                    row.horizon_min, row.delta, row.pct, row.ci_low, row.ci_high, row.n_windows
                );
            }
            let split = pipeline::run_split(&cfg)?;
            report::write_split_report(&cfg, &paths, &split)?;
            println!(
                "subject split: cross/within = {:.3}  ci [{:.3}, {:.3}]",
                split.ratio, split.ci_low, split.ci_high
            );
            println!("reports under {}", paths.reports_dir().display());
        }
        Cmd::Sweep => {
            let sweep = pipeline::run_sweep(&cfg)?;
            report::write_sweep_reports(&cfg, &paths, &sweep)?;
            for (level, row) in sweep.rows() {
                println!(
                    "  {:10} h={:3} min  delta {:+8.3} mg/dL ({:+6.2}%)",
                    level, row.horizon_min, row.delta, row.pct
                );
            }
            println!("reports under {}", paths.reports_dir().display());
        }
        Cmd::Probe => {
            let (outputs, set, _pair) = pipeline::run_probe(&cfg)?;
            report::write_probe_reports(&cfg, &paths, &outputs, &set)?;
            println!(
                "probes: {} ({} ranked pairs, epsilon {})",
                outputs.n_probes,
                set.pairs().len(),
                outputs.epsilon
            );
            println!(
                "  uni    ranking error {:.3}  monotonicity violations {:.3}  insensitive {}",
                outputs.uni.ranking_error,
                outputs.uni.monotonicity_violation_rate,
                outputs.uni.insensitive
            );
            println!(
                "  multi  ranking error {:.3}  monotonicity violations {:.3}  insensitive {}",
                outputs.multi.ranking_error,
                outputs.multi.monotonicity_violation_rate,
                outputs.multi.insensitive
            );
            println!("reports under {}", paths.reports_dir().display());
        }
        Cmd::Report => {
            for file in plot::render_plots(&cfg, &paths)? {
                println!("wrote {}", file.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
