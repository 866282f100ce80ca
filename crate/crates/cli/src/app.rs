//! Command-line surface of the `palm` binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::output::{self, SummaryRow};
use crate::report;
use crate::runner::{self, Prepared, RunReport};
use crate::sweep::{self, Axis, Grid};

pub const OUT_ENV: &str = "PALM_OUT";

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DIVERGED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "palm", version, about = "Continual test-time adaptation experiments on synthetic shift streams")]
pub struct Cli {
    /// Output directory; overrides PALM_OUT and run.out_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the source model on clean data and cache its snapshot.
    TrainSource(ConfigArgs),
    /// Adapt online over one stream per configured seed.
    Run(RunArgs),
    /// Run a parameter grid crossed with seeds.
    Sweep(SweepArgs),
    /// Aggregate summaries into per-domain, ablation and plot-data files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `palm.alpha=0.9`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Train and cache the source model if no snapshot exists.
    #[arg(long)]
    pub train_source: bool,
    /// Also write each stream's batch descriptors as JSON lines.
    #[arg(long)]
    pub dump_scenario: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Grid document with `seeds` and an `[axes]` table.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Built-in grid: eta, pnorm, variants or methods.
    #[arg(long)]
    pub preset: Option<String>,
    /// Extra axis `key=v1,v2,...`; repeatable.
    #[arg(long = "axis", value_name = "KEY=V1,V2")]
    pub axes: Vec<String>,
    /// Seeds, overriding the grid and config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub train_source: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Summary files or directories containing `summary.csv` (default: the output directory).
    pub inputs: Vec<PathBuf>,
    /// Where to write the report (default: `<out>/report`).
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

/// Flag, then environment, then configuration.
pub fn out_dir(flag: Option<&Path>, cfg: Option<&RunConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.map(|c| c.run.out_dir.clone())
        .unwrap_or_else(|| RunConfig::default().run.out_dir)
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    RunConfig::resolve(args.config.as_deref(), &args.overrides)
}

pub enum Outcome {
    Done,
    Diverged,
}

fn train_source_cmd(cli_out: Option<&Path>, args: &ConfigArgs) -> anyhow::Result<Outcome> {
    let cfg = resolve(args)?;
    let out = out_dir(cli_out, Some(&cfg));
    let dataset = runner::load_dataset(&cfg)?;
    let net = runner::train_source(&cfg, &dataset)?;
    let path = runner::source_snapshot_path(&cfg, &out);
    runner::save_source(&net, &path)?;
    let err = runner::source_clean_error(&net, &dataset)?;
    println!("source clean test error {err}");
    println!("snapshot {}", path.display());
    Ok(Outcome::Done)
}

fn print_reports(reports: &[&RunReport]) {
    let mut stdout = std::io::stdout().lock();
    for r in reports {
        let _ = writeln!(
            stdout,
            "{} error {:.4}{} ({} batches, {:.2}s)",
            r.run_id,
            r.overall_error,
            if r.diverged { " DIVERGED" } else { "" },
            r.rows.len(),
            r.wall_time.as_secs_f64()
        );
    }
}

/// Existing summary rows of other runs, followed by `fresh`.
fn merge_summary(path: &Path, fresh: Vec<SummaryRow>) -> anyhow::Result<Vec<SummaryRow>> {
    let mut rows = if path.exists() { output::read_summary(path)? } else { Vec::new() };
    rows.retain(|r| fresh.iter().all(|f| f.run_id != r.run_id));
    rows.extend(fresh);
    Ok(rows)
}

fn run_cmd(cli_out: Option<&Path>, args: &RunArgs) -> anyhow::Result<Outcome> {
    let cfg = resolve(&args.config)?;
    let out = out_dir(cli_out, Some(&cfg));
    let prepared = Prepared::new(&cfg, &out, args.train_source)?;
    if args.dump_scenario {
        for &seed in &cfg.run.seeds {
            let scenario = runner::build_scenario(&cfg, &prepared.dataset, seed)?;
            let mut buf = Vec::new();
            scenario.dump_jsonl(&mut buf)?;
            let name = format!("{}-s{seed}.jsonl", cfg.scenario.protocol);
            output::write_file(&out.join("scenarios").join(name), &buf)?;
        }
    }
    let reports = prepared.run_all(&cfg)?;
    let fresh: Vec<SummaryRow> = reports.iter().map(|r| SummaryRow::from_report(r, "")).collect();
    let summary = merge_summary(&out.join("summary.csv"), fresh)?;
    let refs: Vec<&RunReport> = reports.iter().collect();
    sweep::write_runs(&out, &refs, &summary)?;
    output::write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    print_reports(&refs);
    Ok(if reports.iter().any(|r| r.diverged) {
        Outcome::Diverged
    } else {
        Outcome::Done
    })
}

fn sweep_cmd(cli_out: Option<&Path>, args: &SweepArgs) -> anyhow::Result<Outcome> {
    let cfg = resolve(&args.config)?;
    let out = out_dir(cli_out, Some(&cfg));
    let mut grid = match &args.grid {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Grid::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => Grid::default(),
    };
    if let Some(name) = &args.preset {
        grid.axes.extend(Grid::preset(name)?.axes);
    }
    for spec in &args.axes {
        grid.axes.push(Axis::parse(spec)?);
    }
    if let Some(seeds) = &args.seeds {
        grid.seeds = Some(seeds.clone());
    }
    // Validate the grid before paying for the source model.
    sweep::expand(&cfg, &grid)?;
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let prepared = Prepared::new(&cfg, &out, args.train_source)?;
    let result = sweep::run_sweep(&cfg, &grid, &prepared)?;
    sweep::write_sweep(&out, &result)?;
    output::write_file(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    for (cell, reps) in result.cells.iter().zip(&result.reports) {
        let errors: Vec<f64> = reps.iter().map(|r| r.overall_error).collect();
        let (mean, std) = report::mean_std(&errors);
        println!(
            "{} {} error {:.4} +- {:.4}{}",
            cell.label,
            if cell.params.is_empty() { "-" } else { &cell.params },
            mean,
            std.unwrap_or(0.0),
            if reps.iter().any(|r| r.diverged) { " (diverged runs)" } else { "" }
        );
    }
    Ok(if result.any_diverged() {
        Outcome::Diverged
    } else {
        Outcome::Done
    })
}

fn report_cmd(cli_out: Option<&Path>, args: &ReportArgs) -> anyhow::Result<Outcome> {
    let out = out_dir(cli_out, None);
    let inputs = if args.inputs.is_empty() {
        let default = out.join("summary.csv");
        if default.exists() {
            vec![default]
        } else {
            Vec::new()
        }
    } else {
        args.inputs.clone()
    };
    let runs = report::load(&inputs)?;
    let dir = args.report_dir.clone().unwrap_or_else(|| out.join("report"));
    for path in report::write_report(&dir, &runs)? {
        println!("{}", path.display());
    }
    Ok(Outcome::Done)
}

pub fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::TrainSource(a) => train_source_cmd(out, a),
        Command::Run(a) => run_cmd(out, a),
        Command::Sweep(a) => sweep_cmd(out, a),
        Command::Report(a) => report_cmd(out, a),
    }
}

/// Runs the parsed command and maps the outcome to the documented exit codes.
pub fn main_with(cli: Cli) -> ExitCode {
    match execute(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => {
            eprintln!("warning: at least one run diverged; its report is partial");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flag_beats_config() {
        let mut cfg = RunConfig::default();
        cfg.run.out_dir = PathBuf::from("from-config");
        assert_eq!(out_dir(Some(Path::new("flag")), Some(&cfg)), PathBuf::from("flag"));
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["palm", "run", "--set", "palm.alpha=0.9", "--train-source"]).unwrap();
        match cli.command {
            Command::Run(a) => {
                assert!(a.train_source);
                assert_eq!(a.config.overrides, vec!["palm.alpha=0.9".to_string()]);
            }
            _ => panic!("expected run"),
        }
        let cli = Cli::try_parse_from(["palm", "sweep", "--preset", "eta", "--seeds", "0,1,2"]).unwrap();
        match cli.command {
            Command::Sweep(a) => assert_eq!(a.seeds, Some(vec![0, 1, 2])),
            _ => panic!("expected sweep"),
        }
        assert!(Cli::try_parse_from(["palm", "bogus"]).is_err());
    }
}
