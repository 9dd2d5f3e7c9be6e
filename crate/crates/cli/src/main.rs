use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use ecgnet::pipeline::{self, RunConfig, ThresholdSource};

/// 12-lead ECG abnormality classifier: data synthesis, label adjudication,
/// training, evaluation and self-verification.
#[derive(Parser, Debug)]
#[command(name = "ecgnet", version)]
struct Cli {
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Shared {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON config with flat dotted keys, e.g. {"train.epochs": 10}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Shared {
    fn resolve(&self, mut extra: Vec<String>) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        overrides.append(&mut extra);
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth {
        /// Number of exams.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        /// Class prevalence override, e.g. `ST=0.10` (repeatable).
        #[arg(long, value_name = "CLASS=P")]
        prevalence: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Reconcile diagnosis sources into per-class decisions.
    Adjudicate {
        /// JSON-lines input, or a dataset directory holding sources.jsonl.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Evaluate saved weights on a dataset directory.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Six comma-separated thresholds in class order; skips selection.
        #[arg(long, conflicts_with = "calibration")]
        thresholds: Option<String>,
        /// Dataset on which to choose max-F1 thresholds. Without this or
        /// --thresholds, a held-out share of --dataset is used.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Run the gradient checks and the metric golden test.
    Selfcheck,
}

fn run_synth(n: Option<u64>, prevalence: &[String], out: &Path, shared: &Shared) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(n) = n {
        extra.push(format!("synth.n={n}"));
    }
    for p in prevalence {
        let (class, v) = p
            .split_once('=')
            .with_context(|| format!("--prevalence {p:?} is not CLASS=P"))?;
        let class: ecgnet::Abnormality = class.trim().parse()?;
        extra.push(format!("synth.prevalence.{}={}", class.abbrev(), v.trim()));
    }
    let cfg = shared.resolve(extra)?;
    let entries = pipeline::synth(&cfg, out)?;
    println!("wrote {} exams to {}", entries.len(), out.display());
    Ok(())
}

fn run_adjudicate(input: &Path, out: &Path) -> Result<()> {
    let outcome = pipeline::adjudicate(input, out)?;
    let s = &outcome.summary;
    if s.exams == 0 && s.malformed > 0 {
        bail!("all {} input lines were malformed", s.malformed);
    }
    if s.malformed > 0 {
        warn!("{} malformed lines skipped", s.malformed);
    }
    print!("{}", s.table());
    println!("{} exams adjudicated, {} malformed lines", s.exams, s.malformed);
    Ok(())
}

fn run_train(dataset: &Path, out: &Path, shared: &Shared) -> Result<()> {
    let cfg = shared.resolve(Vec::new())?;
    let run = pipeline::train_run(dataset, &cfg, out)?;
    let best = run.log.best().context("training produced no epochs")?;
    println!(
        "best epoch {} of {}: validation loss {:.5}; weights in {}",
        best.epoch + 1,
        run.log.epochs.len(),
        best.val_loss,
        out.join(pipeline::WEIGHTS_FILE).display()
    );
    Ok(())
}

fn run_eval(
    dataset: &Path,
    weights: &Path,
    thresholds: Option<&str>,
    calibration: Option<&Path>,
    out: &Path,
    shared: &Shared,
) -> Result<()> {
    let cfg = shared.resolve(Vec::new())?;
    let source = match (thresholds, calibration) {
        (Some(t), _) => ThresholdSource::Fixed(pipeline::parse_thresholds(t)?),
        (None, Some(dir)) => ThresholdSource::Calibration(dir.to_path_buf()),
        (None, None) => ThresholdSource::HeldOut,
    };
    let report = pipeline::eval_run(dataset, weights, &source, &cfg, out)?;
    print!("{}", report.table());
    info!("report written to {}", out.display());
    Ok(())
}

fn run_selfcheck() -> Result<bool> {
    let lines = pipeline::selfcheck()?;
    let mut ok = true;
    for l in &lines {
        println!(
            "{}  {:<44} {}",
            if l.passed { "PASS" } else { "FAIL" },
            l.name,
            l.detail
        );
        ok &= l.passed;
    }
    println!("{}", if ok { "all checks passed" } else { "some checks FAILED" });
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::Synth {
            n,
            prevalence,
            out,
            shared,
        } => run_synth(*n, prevalence, out, shared),
        Command::Adjudicate { input, out } => run_adjudicate(input, out),
        Command::Train { dataset, out, shared } => run_train(dataset, out, shared),
        Command::Eval {
            dataset,
            weights,
            thresholds,
            calibration,
            out,
            shared,
        } => run_eval(
            dataset,
            weights,
            thresholds.as_deref(),
            calibration.as_deref(),
            out,
            shared,
        ),
        Command::Selfcheck => match run_selfcheck() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e
                .downcast_ref::<ecgnet::Error>()
                .is_some_and(|e| matches!(e, ecgnet::Error::Config(_)));
            eprintln!("error: {e:#}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
