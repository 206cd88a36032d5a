//! The `art` command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{ArtError, Result};
use crate::experiment::{self, ablation_csv, thread_cap};
use crate::gradcheck;
use crate::head::inspect;
use crate::oracle;
use crate::synth;
use crate::trainer::{self, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "art", version, about = "Action-region tracking head on synthetic videos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "art_out")]
    pub out: PathBuf,
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    pub single_thread: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the training and held-out datasets.
    Synth,
    /// Train, write metrics and checkpoints, evaluate on the held-out set.
    Train,
    /// Evaluate a checkpoint on the training and held-out sets.
    Eval,
    /// Finite-difference check of every op, layer and loss.
    Gradcheck,
    /// Compare every loss with its loop oracle on random instances.
    Losses,
    /// Component ablation plus K and lambda sweeps.
    Ablate,
    /// Export attention maps and tracklets of a checkpoint.
    Inspect,
}

impl Cli {
    /// Loads the config and applies the command-line overrides.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.single_thread |= self.single_thread;
        Ok(cfg.resolved())
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn checkpoint_dir(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.checkpoint
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join("checkpoints").join("final"))
}

/// Runs one command. `Ok` carries the process exit code; contract
/// violations come back as errors.
pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = cli.resolve_config()?;
    cfg.validate()?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    let echo = cfg.echo();
    write_json(&out.join("config_echo.json"), &echo)?;
    log::info!("resolved config: {}", echo);
    let threads = thread_cap(cfg.single_thread)?;
    let pool = match threads {
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| ArtError::Config(e.to_string()))?,
        ),
        None => None,
    };
    let work = || dispatch(cli.command, &cfg, out, threads, echo.clone());
    match pool {
        Some(p) => p.install(work),
        None => work(),
    }
}

fn dispatch(
    command: Command,
    cfg: &RunConfig,
    out: &Path,
    threads: Option<usize>,
    echo: serde_json::Value,
) -> Result<ExitCode> {
    match command {
        Command::Synth => {
            let (train, test) = experiment::datasets(cfg)?;
            synth::write_dataset(&train, &cfg.synth, &out.join("data").join("train"))?;
            synth::write_dataset(&test, &cfg.synth, &out.join("data").join("test"))?;
            let report = json!({"n_train": train.len(), "n_test": test.len(), "dir": out.join("data")});
            write_json(&out.join("report.json"), &report)?;
            println!("wrote {} training and {} held-out videos to {}", train.len(), test.len(), out.join("data").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => {
            let (train, test) = experiment::datasets(cfg)?;
            let run = RunOptions {
                out_dir: Some(out.to_path_buf()),
                threads,
                config_echo: Some(echo),
            };
            let (summary, eval) = experiment::train_and_eval(cfg, &train, &test, &run)?;
            let last = summary.reports.last();
            let report = json!({
                "steps": summary.reports.len(),
                "final_total": last.map(|r| r.total),
                "final_train_accuracy": summary.final_train_accuracy,
                "test": eval,
            });
            write_json(&out.join("report.json"), &report)?;
            println!(
                "{} steps, train top1 {:.4}, held-out top1 {:.4}, hit rate {}",
                summary.reports.len(),
                summary.final_train_accuracy,
                eval.top1,
                eval.hit_rate.map_or("n/a".into(), |h| format!("{:.4}", h))
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval => {
            let model = trainer::load_checkpoint(&checkpoint_dir(cfg, out))?;
            let (train, test) = experiment::datasets(cfg)?;
            let train_eval = trainer::evaluate(&model, &train, cfg.hit_radius)?;
            let test_eval = trainer::evaluate(&model, &test, cfg.hit_radius)?;
            write_json(&out.join("report.json"), &json!({"train": train_eval, "test": test_eval}))?;
            println!("train top1 {:.4}, held-out top1 {:.4}", train_eval.top1, test_eval.top1);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let reports = gradcheck::run(cfg.seed, &cfg.gradcheck)?;
            for r in &reports {
                println!("{:<24} {:.3e}  {}", r.op, r.max_rel_error, if r.passed() { "ok" } else { "FAIL" });
            }
            write_json(&out.join("report.json"), &reports)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
            if failed.is_empty() {
                println!("{} checks passed", reports.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Losses => {
            let checks = oracle::run_loss_oracles(cfg.seed, cfg.oracle_instances)?;
            for c in &checks {
                println!("{:<24} max deviation {:.3e}", c.name, c.max_deviation);
            }
            let report: Vec<_> = checks
                .iter()
                .map(|c| json!({"loss": c.name, "instances": c.instances, "max_deviation": c.max_deviation}))
                .collect();
            write_json(&out.join("report.json"), &report)?;
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
            if failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("oracle mismatch above {:e}: {}", oracle::ORACLE_TOL, failed.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Ablate => {
            let rows = experiment::ablation_grid(cfg, &cfg.ablate, threads);
            fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
            write_json(&out.join("ablation.json"), &rows)?;
            write_json(&out.join("report.json"), &rows)?;
            print!("{}", ablation_csv(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect => {
            let model = trainer::load_checkpoint(&checkpoint_dir(cfg, out))?;
            let (_, test) = experiment::datasets(cfg)?;
            let mut written = Vec::new();
            for s in test.iter().take(cfg.inspect_videos) {
                let dir = out.join("inspect").join(format!("video_{:06}", s.index));
                let index = inspect::export(&model.infer(&s.video)?, &model.cfg, &dir)?;
                written.push(json!({
                    "video": s.index,
                    "label": s.label,
                    "predicted_class": index.predicted_class,
                    "dir": dir,
                }));
            }
            write_json(&out.join("report.json"), &written)?;
            println!("exported {} videos to {}", written.len(), out.join("inspect").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Entry point of the `art` binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
