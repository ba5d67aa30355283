//! `tailquant` command-line driver.
//!
//! Failures print one line `error: <category>: <message>` to stderr and exit
//! with status 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tailquant::config::RunConfig;
use tailquant::exec::{init_threads, Exec};
use tailquant::experiment::{self, ExperimentError};

#[derive(Debug, Parser)]
#[command(name = "tailquant", version, about = "Multi-quantile downscaling experiments on a synthetic heavy-tailed world")]
struct Cli {
    /// Flat key=value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// World seed for `gen`; training seed for every other verb.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out` from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite an existing dataset directory.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (1 runs sequentially).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset directory (overrides `data` from the config).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen {
        /// Number of samples (train + test).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the configured head; writes a checkpoint and a loss log.
    Train,
    /// Score a checkpoint; writes metrics.json and metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// {deterministic, quantile} × {no augmentation, augmentation}.
    Factorial,
    /// sorted → increment shared → increment separate heads.
    Ablate,
    /// One train+eval per augmentation ratio and model.
    AugSweep {
        /// Comma-separated ratios (default: `sweep.ratios`).
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Collect every metrics.json under a directory into one table.
    Report {
        /// Directory to scan (default: the output directory).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let exec = match cli.threads {
        Some(0) => return Err(ExperimentError::Invalid("--threads must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            init_threads(n);
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    let out = cfg.out.clone();
    let set_data = |cfg: &mut RunConfig| -> Result<(), ExperimentError> {
        if let Some(p) = &cli.data {
            cfg.data = Some(p.clone());
        }
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(())
    };
    Ok(match &cli.command {
        Command::Gen { n } => {
            if let Some(n) = n {
                cfg.n = *n;
            }
            if let Some(s) = cli.seed {
                cfg.world.seed = s;
            }
            cfg.validate()?;
            let d = experiment::cmd_gen(&cfg, &out, cli.force, exec)?;
            format!("wrote {} samples to {}", d.records.len(), out.display())
        }
        Command::Train => {
            set_data(&mut cfg)?;
            let cell = experiment::cmd_train(&cfg, &out, exec)?;
            let last = cell.log.last().map(|l| l.loss).unwrap_or(f64::NAN);
            format!("trained {} for {} epochs (final loss {last:.6}); wrote {}", cell.model.head, cell.log.len(), out.display())
        }
        Command::Eval { checkpoint, split } => {
            set_data(&mut cfg)?;
            let dir = cfg
                .data
                .clone()
                .ok_or_else(|| ExperimentError::Invalid("eval needs a dataset directory (data = ... or --data)".into()))?;
            let r = experiment::cmd_eval(&cfg, checkpoint, &dir, split, &out, exec)?;
            format!("evaluated {} samples; wrote {}", r.n_samples, out.join("metrics.json").display())
        }
        Command::Factorial => {
            set_data(&mut cfg)?;
            let t = experiment::cmd_factorial(&cfg, &out, exec)?;
            format!("{} rows; wrote {}", t.rows.len(), out.join("factorial.csv").display())
        }
        Command::Ablate => {
            set_data(&mut cfg)?;
            let t = experiment::cmd_ablate(&cfg, &out, exec)?;
            format!("{} rows; wrote {}", t.rows.len(), out.join("ablation.csv").display())
        }
        Command::AugSweep { ratios } => {
            set_data(&mut cfg)?;
            let ratios = ratios.clone().unwrap_or_else(|| cfg.sweep.ratios.clone());
            let t = experiment::cmd_aug_sweep(&cfg, &ratios, &out, exec)?;
            format!("{} rows; wrote {}", t.rows.len(), out.join("aug_sweep.csv").display())
        }
        Command::Report { dir } => {
            let dir = dir.clone().unwrap_or_else(|| out.clone());
            let t = experiment::cmd_report(&dir, &out)?;
            format!("{} reports; wrote {}", t.rows.len(), Path::new(&out).join("report.csv").display())
        }
    })
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
