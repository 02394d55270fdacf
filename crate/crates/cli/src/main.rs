use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use siamseg_cli::commands::{self, TrainOptions};
use siamseg_cli::config::OUT_ENV;
use siamseg_cli::{CliError, CliResult, RunConfig};

/// One-shot segmentation with a selector-gated Siamese network.
#[derive(Parser, Debug)]
#[command(name = "siamseg", version)]
struct Cli {
    /// Run config file of `key=value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set iterations=2000`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Output directory; beats both the config file and SIAMSEG_OUT.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and held-out evaluation datasets.
    MakeData,
    /// Train, evaluating and checkpointing on the configured schedule.
    Train {
        /// Stop after this many completed iterations; rerun to resume.
        #[arg(long)]
        stop_after: Option<u64>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on the evaluation set.
    Eval {
        /// Defaults to `<out_dir>/checkpoint.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare finished runs: iterations to converge and plateau accuracy.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the resolved config in canonical form.
    ShowConfig,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut pairs = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io { path: p.clone(), source: e })?;
            RunConfig::parse_lines(&text)?
        }
        None => Vec::new(),
    };
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut cfg = RunConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        cfg.out_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &cli.out {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Command::Report { runs, output } = &cli.command {
        let report = commands::report(runs)?;
        let table = report.to_csv();
        print!("{table}");
        if let Some(trend) = report.trend() {
            eprintln!("{trend}");
        }
        if let Some(p) = output {
            std::fs::write(p, &table).map_err(|e| CliError::Io { path: p.clone(), source: e })?;
        }
        return Ok(());
    }
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::MakeData => {
            let s = commands::make_data(&cfg)?;
            println!("train episodes: {} ({})", s.train_episodes, s.train_dir.display());
            println!("eval episodes: {} ({})", s.eval_episodes, s.eval_dir.display());
            println!("eval needle classes: {:?}", s.eval_needle_classes);
            println!("mean objects per eval haystack: {:.3}", s.mean_eval_objects);
        }
        Command::Train { stop_after, quiet } => {
            let s = commands::train(&cfg, &TrainOptions { stop_after, verbose: !quiet })?;
            if let Some(i) = s.resumed_from {
                println!("resumed from iteration {i}");
            }
            println!("finished at iteration {} ({} evaluations)", s.final_iteration, s.curve.len());
            if let Some(last) = s.curve.last() {
                println!("accuracy {:.4}, mean IoU {:.4}", last.accuracy, last.mean_iou);
            }
            if s.skipped_steps > 0 {
                println!("{} steps skipped for non-finite gradients", s.skipped_steps);
            }
        }
        Command::Eval { checkpoint } => {
            let r = commands::eval(&cfg, checkpoint.as_deref())?;
            print!("{}", r.to_text());
            println!("report written to {}", cfg.out_dir.join("eval").display());
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
