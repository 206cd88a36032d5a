//! Dataset construction, train-then-evaluate runs and the ablation grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AblationSetting, RunConfig};
use crate::error::{ArtError, Result};
use crate::synth::{self, SynthSample};
use crate::trainer::{self, EvalReport, RunOptions, TrainSummary};

/// Thread cap for a run: one thread when `single_thread`, else `ART_THREADS`
/// when set, else the global pool.
pub fn thread_cap(single_thread: bool) -> Result<Option<usize>> {
    if single_thread {
        return Ok(Some(1));
    }
    match std::env::var("ART_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ArtError::Config(format!("ART_THREADS must be a positive integer, got {:?}", v))),
        },
        Err(_) => Ok(None),
    }
}

/// Training and held-out sets. Read from `data.dir` when configured,
/// otherwise generated: training indices `0..n_train`, test indices after.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let cfg = cfg.resolved();
    if let Some(dir) = &cfg.data.dir {
        let dir = Path::new(dir);
        let (train_cfg, train) = synth::read_dataset(&dir.join("train"))?;
        let (_, test) = synth::read_dataset(&dir.join("test"))?;
        if train_cfg.t != cfg.model.t || train_cfg.c != cfg.model.c {
            return Err(ArtError::Config(format!(
                "dataset in {} has (T, C) = {:?}, model expects {:?}",
                dir.display(),
                (train_cfg.t, train_cfg.c),
                (cfg.model.t, cfg.model.c)
            )));
        }
        return Ok((train, test));
    }
    let train = synth::generate_range(&cfg.synth, 0, cfg.data.n_train)?;
    let test = synth::generate_range(&cfg.synth, cfg.data.n_train as u64, cfg.data.n_test)?;
    Ok((train, test))
}

/// Trains a fresh model and evaluates it on the held-out set.
pub fn train_and_eval(
    cfg: &RunConfig,
    train: &[SynthSample],
    test: &[SynthSample],
    run: &RunOptions,
) -> Result<(TrainSummary, EvalReport)> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let mut model = cfg.build_model()?;
    let summary = trainer::train(&mut model, train, &cfg.train, run)?;
    let eval = trainer::evaluate(&model, test, cfg.hit_radius)?;
    Ok((summary, eval))
}

/// Sweep values of the ablation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub k_values: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Seeds to repeat every cell with; empty means the run seed.
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            k_values: vec![1, 2, 3, 4],
            lambdas: vec![0.2, 0.4, 0.6, 0.8],
            seeds: Vec::new(),
        }
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `component`, `k` or `lambda`.
    pub sweep: String,
    pub setting: String,
    pub seed: u64,
    pub k: usize,
    pub lambda: f64,
    pub top1: Option<f64>,
    pub mean_class: Option<f64>,
    pub hit_rate: Option<f64>,
    pub error: Option<String>,
}

pub const ABLATION_CSV_HEADER: &str = "sweep,setting,seed,k,lambda,top1,mean_class,hit_rate,error";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{}", x)).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.sweep,
            self.setting,
            self.seed,
            self.k,
            self.lambda,
            opt(self.top1),
            opt(self.mean_class),
            opt(self.hit_rate),
            self.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        )
    }
}

fn cell(sweep: &str, setting: &str, cfg: &RunConfig, threads: Option<usize>) -> AblationRow {
    let mut row = AblationRow {
        sweep: sweep.into(),
        setting: setting.into(),
        seed: cfg.seed,
        k: cfg.model.k,
        lambda: cfg.train.mtc.lambda,
        top1: None,
        mean_class: None,
        hit_rate: None,
        error: None,
    };
    let run = RunOptions {
        threads,
        ..RunOptions::default()
    };
    let result = datasets(cfg).and_then(|(train, test)| train_and_eval(cfg, &train, &test, &run));
    match result {
        Ok((_, eval)) => {
            row.top1 = Some(eval.top1);
            row.mean_class = Some(eval.mean_class);
            row.hit_rate = eval.hit_rate;
        }
        Err(e) => {
            log::warn!("ablation cell {}/{} failed: {}", sweep, setting, e);
            row.error = Some(e.to_string());
        }
    }
    row
}

/// The five component settings, then the `K` and `λ` sweeps of the full
/// head, for every seed. Failed cells are recorded and the grid continues.
pub fn ablation_grid(base: &RunConfig, ablate: &AblateConfig, threads: Option<usize>) -> Vec<AblationRow> {
    let seeds = if ablate.seeds.is_empty() {
        vec![base.seed]
    } else {
        ablate.seeds.clone()
    };
    let mut rows = Vec::new();
    for seed in seeds {
        let base = base.with_seed(seed);
        for setting in AblationSetting::ALL {
            rows.push(cell("component", setting.name(), &base.with_setting(setting), threads));
        }
        let full = base.with_setting(AblationSetting::Full);
        for &k in &ablate.k_values {
            let mut c = full.clone();
            c.model.k = k;
            rows.push(cell("k", &format!("k={}", k), &c, threads));
        }
        for &lambda in &ablate.lambdas {
            let mut c = full.clone();
            c.train.mtc.lambda = lambda;
            rows.push(cell("lambda", &format!("lambda={}", lambda), &c, threads));
        }
    }
    rows
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
