//! `fpl`: run poisoning experiments, sweeps and ordering checks.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fpl_core::baselines::BaselineMode;
use fpl_core::catalog::Setting;
use fpl_core::harness::{
    check_ordering, emit_report, parse_chain, run_experiment, sweep, ExperimentConfig, Report,
    ReportFormat, SweepAxis,
};

#[derive(Parser)]
#[command(
    name = "fpl",
    version,
    about = "Cross-modal poisoning testbed for a toy multimodal recommender"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment over the configured seeds.
    Run(RunArgs),
    /// Run one experiment per value of a swept parameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Swept parameter: rho, kappa or mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
    /// Check that mean ER values increase along a chain of names.
    Check {
        /// JSON report from `sweep --axis mode` (or `run`).
        #[arg(long, conflicts_with = "values")]
        report: Option<PathBuf>,
        /// Inline values instead of a report, as `name=value` pairs.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Names separated by `<`, e.g. `no_attack<tab_only<full_cip`.
        #[arg(long)]
        expect_chain: String,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        /// Cut-off whose ER is compared.
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML experiment config; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list; repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    attack: Option<BaselineMode>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    setting: Option<Setting>,
    /// Report destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    /// Fine-tune the clean model on poisoned data instead of retraining.
    #[arg(long)]
    finetune: bool,
    /// Directory for poisoned-model checkpoints.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(mode) = self.attack {
            cfg.mode = mode;
        }
        if let Some(rho) = self.rho {
            cfg.rho = rho;
        }
        if let Some(kappa) = self.kappa {
            cfg.kappa = kappa;
        }
        if let Some(setting) = self.setting {
            cfg.setting = setting;
        }
        cfg.finetune |= self.finetune;
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn write(&self, report: &Report) -> Result<()> {
        match &self.out {
            Some(path) => emit_report(report, self.format, path)?,
            None => match self.format {
                ReportFormat::Json => println!("{}", report.to_json()),
                ReportFormat::Csv => print!("{}", report.to_csv()),
            },
        }
        Ok(())
    }
}

fn inline_values(pairs: &[String]) -> Result<BTreeMap<String, f64>> {
    pairs
        .iter()
        .map(|p| {
            let (name, value) = p
                .split_once('=')
                .with_context(|| format!("expected name=value, got {p:?}"))?;
            let value: f64 = value
                .trim()
                .parse()
                .with_context(|| format!("bad number in {p:?}"))?;
            Ok((name.trim().to_string(), value))
        })
        .collect()
}

/// `Ok(true)` when the command succeeded, `Ok(false)` for a failed check.
fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let run = run_experiment(&cfg)?;
            for (seed, t) in run.seeds.iter().zip(&run.timings) {
                eprintln!("seed {} done in {:.1}s", seed.seed, t.as_secs_f64());
            }
            args.write(&Report::single(run))?;
        }
        Command::Sweep { run, axis, values } => {
            let axis = SweepAxis::parse(&axis, &values.join(","))?;
            let cfg = run.config()?;
            let runs = sweep(&cfg, &axis)?;
            run.write(&Report::sweep(&axis, runs))?;
        }
        Command::Check {
            report,
            values,
            expect_chain,
            margin,
            k,
        } => {
            let named = match report {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    Report::from_json(&text)?.mean_er_by_mode(k)?
                }
                None if !values.is_empty() => inline_values(&values)?,
                None => bail!("check needs --report or --values"),
            };
            let outcome = check_ordering(&named, &parse_chain(&expect_chain), margin)?;
            println!("{outcome}");
            return Ok(outcome.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
