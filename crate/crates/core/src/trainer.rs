//! Training loop and evaluation.
//!
//! Each step runs one graph per sample, reduces the per-sample gradients in
//! sample order (so the result does not depend on the thread count), takes a
//! plain gradient-descent step on the head parameters and then moves the
//! semantic bank by its EMA rule.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{self, SemanticBank};
use crate::error::{ArtError, Result, StageExt, TensorError};
use crate::head::{argmax, ArtModel, ForwardOptions, ModelConfig, PROTOTYPES};
use crate::mtc::{self, MtcConfig, MtcTerms};
use crate::params::{Bound, ParamStore};
use crate::rng::substream;
use crate::synth::{tracking_hit_rate, SynthSample};
use crate::tensor::io::Dtype;
use crate::tensor::{Graph, Tensor, Var};

/// Totals above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub const METRICS_HEADER: &str =
    "step,epoch,l_v,l_con,l_spatial,l_temporal,l_tracklet,l_sema,total,grad_norm,acc";

/// Update rule for the head parameters. The bank agent always takes the
/// plain `Sa − η·∇` step of the EMA rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates for [`Optimizer::Adam`].
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    steps: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    /// Applies one update in place. A zero learning rate leaves every
    /// parameter untouched.
    pub fn apply(&mut self, opt: &Optimizer, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.steps += 1;
        for (name, t) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match *opt {
                Optimizer::Sgd => t.data_mut().iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, v) = self
                        .moments
                        .entry(name.clone())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - beta1.powi(self.steps);
                    let c2 = 1.0 - beta2.powi(self.steps);
                    for (((x, d), m), v) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Steps trained with the MTC weight held at 0 before `gamma1` applies.
    pub mtc_warmup: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Multiplier applied to `lr` every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub mtc: MtcConfig,
    /// EMA momentum of the served bank.
    pub mu: f64,
    /// Step size of the agent bank; unset follows `lr`.
    pub eta: Option<f64>,
    /// Dropout on the concat features before the prototype head.
    pub dropout: f64,
    /// Sum the prototype-consistency rows instead of averaging them.
    pub sum_prototype_rows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma1: 5.0,
            gamma2: 5.0,
            mtc_warmup: 0,
            lr: 0.01,
            optimizer: Optimizer::Sgd,
            lr_decay: 0.1,
            decay_every: 10,
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            seed: 0,
            mtc: MtcConfig::default(),
            mu: 0.99,
            eta: None,
            dropout: 0.0,
            sum_prototype_rows: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return Err(ArtError::Config("gamma1 and gamma2 must be >= 0".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ArtError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(ArtError::Config(
                "batch_size, epochs and decay_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ArtError::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        let eta = self.agent_lr();
        if !(0.0..=1.0).contains(&self.mu) || eta.is_nan() || eta < 0.0 {
            return Err(ArtError::Config("bank mu must lie in [0, 1] and eta >= 0".into()));
        }
        self.mtc.validate()
    }

    pub fn agent_lr(&self) -> f64 {
        self.eta.unwrap_or(self.lr)
    }

    /// MTC weight in force at `step`.
    pub fn gamma1_at(&self, step: usize) -> f64 {
        if step < self.mtc_warmup {
            0.0
        } else {
            self.gamma1
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One logged optimization step. Loss values are batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub l_v: f64,
    pub l_con: f64,
    pub l_spatial: f64,
    pub l_temporal: f64,
    pub l_tracklet: f64,
    pub l_sema: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub acc: f64,
    /// Batch mean of the adjacent-frame response cosine.
    pub adjacent_cosine: f64,
    pub wall_ms: f64,
}

impl StepReport {
    pub fn l_mtc(&self) -> f64 {
        self.l_spatial + self.l_temporal + self.l_tracklet
    }

    /// `l_v + l_con + γ₁·l_mtc + γ₂·l_sema` from the logged components.
    pub fn reconstructed_total(&self, gamma1: f64, gamma2: f64) -> f64 {
        loss_total(self.l_v, self.l_con, self.l_mtc(), self.l_sema, gamma1, gamma2)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.l_v,
            self.l_con,
            self.l_spatial,
            self.l_temporal,
            self.l_tracklet,
            self.l_sema,
            self.total,
            self.grad_norm,
            self.acc
        )
    }
}

pub fn loss_total(l_v: f64, l_con: f64, l_mtc: f64, l_sema: f64, gamma1: f64, gamma2: f64) -> f64 {
    l_v + l_con + gamma1 * l_mtc + gamma2 * l_sema
}

pub fn metrics_csv(reports: &[StepReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Per-step wall time, kept out of `metrics.csv` so that file stays
/// reproducible.
pub fn timings_csv(reports: &[StepReport]) -> String {
    let mut s = String::from("step,wall_ms\n");
    for r in reports {
        let _ = writeln!(s, "{},{}", r.step, r.wall_ms);
    }
    s
}

fn write_logs(dir: &Path, reports: &[StepReport]) -> Result<()> {
    fs::write(dir.join("metrics.csv"), metrics_csv(reports))?;
    fs::write(dir.join("timings.csv"), timings_csv(reports))?;
    Ok(())
}

/// Where and how a run executes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Receives `metrics.csv`, `timings.csv` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Written next to every checkpoint as `config_echo.json`.
    pub config_echo: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub reports: Vec<StepReport>,
    /// Top-1 of the final parameters on the training set.
    pub final_train_accuracy: f64,
}

struct SamplePass {
    grads: BTreeMap<String, Vec<f64>>,
    sa_grad: Vec<f64>,
    l_v: f64,
    l_con: f64,
    l_spatial: f64,
    l_temporal: f64,
    l_tracklet: f64,
    l_video: f64,
    /// Value of this sample's share of the batch objective.
    objective: f64,
    correct: bool,
    adjacent_cosine: f64,
}

/// Graph nodes of one sample's share of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct SampleObjective {
    pub l_v: Var,
    pub l_con: Var,
    pub l_video: Var,
    pub mtc: Option<MtcTerms>,
    pub logits_con: Var,
    /// `l_v + l_con + γ₂·l_video + γ₁·l_mtc`, unscaled by the batch size.
    pub objective: Var,
}

/// Builds the per-sample objective on `g`. The prototype-consistency half of
/// the semantic loss is per batch and not included.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective(
    g: &mut Graph,
    b: &Bound,
    sa: Var,
    model: &ArtModel,
    sample: &SynthSample,
    cfg: &TrainConfig,
    gamma1: f64,
    opts: &ForwardOptions,
) -> Result<SampleObjective> {
    let out = model.forward(g, b, &sample.video, opts)?;
    let l_v = g.cross_entropy(out.logits_v, sample.label).stage("l_v")?;
    let l_con = g.cross_entropy(out.logits_con, sample.label).stage("l_con")?;
    let proj = b.var(bank::PROJ)?;
    let l_video = bank::video_consistency_loss(g, out.x_cls, sa, proj, sample.label).stage("l_sema")?;

    let mut terms = vec![l_v, l_con];
    terms.push(g.scale(l_video, cfg.gamma2)?);
    let mut mtc_terms = None;
    if !out.responses.is_empty() {
        let m = mtc::mtc_total(g, &out.responses, &out.tracklets, &cfg.mtc).stage("l_mtc")?;
        // γ₁ = 0 leaves the MTC nodes out of the objective entirely
        if gamma1 != 0.0 {
            terms.push(g.scale(m.total, gamma1)?);
        }
        mtc_terms = Some(m);
    }
    let objective = g.add_n(&terms)?;
    Ok(SampleObjective {
        l_v,
        l_con,
        l_video,
        mtc: mtc_terms,
        logits_con: out.logits_con,
        objective,
    })
}

fn sample_pass(
    model: &ArtModel,
    sample: &SynthSample,
    cfg: &TrainConfig,
    weight: f64,
    gamma1: f64,
    concat_mask: Option<Tensor>,
) -> Result<SamplePass> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g)?;
    let sa = g.leaf(&model.bank.sa)?;
    let opts = ForwardOptions {
        concat_mask,
        ..ForwardOptions::default()
    };
    let o = sample_objective(&mut g, &b, sa, model, sample, cfg, gamma1, &opts)?;
    let objective = g.scale(o.objective, weight)?;
    g.backward(objective)?;
    let (l_spatial, l_temporal, l_tracklet, adjacent_cosine) = match o.mtc {
        Some(m) => (g.scalar(m.spatial), g.scalar(m.temporal), g.scalar(m.tracklet), m.adjacent_cosine),
        None => (0.0, 0.0, 0.0, 0.0),
    };
    Ok(SamplePass {
        grads: model.params.collect_grads(&g, &b),
        sa_grad: g.grad(sa).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; model.bank.sa.numel()]),
        l_v: g.scalar(o.l_v),
        l_con: g.scalar(o.l_con),
        l_spatial,
        l_temporal,
        l_tracklet,
        l_video: g.scalar(o.l_video),
        objective: g.scalar(objective),
        correct: argmax(g.value(o.logits_con)) == sample.label,
        adjacent_cosine,
    })
}

/// Prototype-consistency loss, computed once per batch. Returns
/// `(value, γ₂-weighted gradients, Sa gradient)`.
pub fn prototype_objective(g: &mut Graph, b: &Bound, sa: Var, cfg: &TrainConfig) -> Result<Var> {
    let w = b.var(PROTOTYPES)?;
    bank::prototype_consistency_loss(g, b, w, sa, cfg.sum_prototype_rows).stage("l_sema")
}

type Grads = BTreeMap<String, Vec<f64>>;

fn prototype_pass(model: &ArtModel, cfg: &TrainConfig) -> Result<(f64, Grads, Vec<f64>)> {
    let mut g = Graph::new();
    let b = model.params.bind(&mut g)?;
    let sa = g.leaf(&model.bank.sa)?;
    let l = prototype_objective(&mut g, &b, sa, cfg)?;
    let weighted = g.scale(l, cfg.gamma2)?;
    g.backward(weighted)?;
    let sa_grad = g.grad(sa).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; model.bank.sa.numel()]);
    Ok((g.scalar(l), model.params.collect_grads(&g, &b), sa_grad))
}

fn accumulate(into: &mut BTreeMap<String, Vec<f64>>, from: &BTreeMap<String, Vec<f64>>) {
    for (name, g) in from {
        match into.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

fn dropout_mask(cfg: &TrainConfig, dim: usize, draw: u64) -> Option<Tensor> {
    if cfg.dropout == 0.0 {
        return None;
    }
    let keep = 1.0 - cfg.dropout;
    let mut rng = substream(cfg.seed, "dropout", draw);
    Some(Tensor::from_fn(&[1, dim], |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

/// Converts non-finite values raised inside the graph into a divergence
/// error naming the stage.
fn as_divergence(err: ArtError, step: usize) -> ArtError {
    match err {
        ArtError::Stage {
            stage,
            source: TensorError::NonFinite { .. },
        } => ArtError::Divergence {
            step,
            component: stage,
            value: f64::NAN,
        },
        ArtError::Tensor(TensorError::NonFinite { op }) => ArtError::Divergence {
            step,
            component: op,
            value: f64::NAN,
        },
        e => e,
    }
}

fn check_divergence(r: &StepReport) -> Result<()> {
    let parts = [
        ("l_v", r.l_v),
        ("l_con", r.l_con),
        ("l_spatial", r.l_spatial),
        ("l_temporal", r.l_temporal),
        ("l_tracklet", r.l_tracklet),
        ("l_sema", r.l_sema),
        ("total", r.total),
    ];
    for (component, value) in parts {
        if !value.is_finite() {
            return Err(ArtError::Divergence {
                step: r.step,
                component,
                value,
            });
        }
    }
    if r.total > DIVERGENCE_LIMIT {
        return Err(ArtError::Divergence {
            step: r.step,
            component: "total",
            value: r.total,
        });
    }
    Ok(())
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| ArtError::Config(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// One optimization step on `batch`. Updates `model` in place unless the
/// step diverges.
pub fn train_step(
    model: &mut ArtModel,
    opt: &mut OptimizerState,
    batch: &[&SynthSample],
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
    epoch: usize,
) -> Result<StepReport> {
    let start = Instant::now();
    let n = batch.len();
    let weight = 1.0 / n as f64;
    let concat_dim = model.cfg.concat_dim();
    let passes: Vec<Result<SamplePass>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mask = dropout_mask(cfg, concat_dim, (step * n + i) as u64);
            sample_pass(model, s, cfg, weight, cfg.gamma1_at(step), mask)
        })
        .collect();
    let passes = passes
        .into_iter()
        .collect::<Result<Vec<_>>>()
        .map_err(|e| as_divergence(e, step))?;
    let (l_prot, proto_grads, proto_sa) = prototype_pass(model, cfg).map_err(|e| as_divergence(e, step))?;

    let mut grads = BTreeMap::new();
    let mut sa_grad = vec![0.0; model.bank.sa.numel()];
    let mut objective = 0.0;
    let mean = |f: &dyn Fn(&SamplePass) -> f64| passes.iter().map(f).sum::<f64>() / n as f64;
    for p in &passes {
        accumulate(&mut grads, &p.grads);
        sa_grad.iter_mut().zip(&p.sa_grad).for_each(|(a, b)| *a += b);
        objective += p.objective;
    }
    accumulate(&mut grads, &proto_grads);
    sa_grad.iter_mut().zip(&proto_sa).for_each(|(a, b)| *a += b);
    objective += cfg.gamma2 * l_prot;

    let grad_norm = grads
        .values()
        .flatten()
        .chain(sa_grad.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    let report = StepReport {
        step,
        epoch,
        l_v: mean(&|p| p.l_v),
        l_con: mean(&|p| p.l_con),
        l_spatial: mean(&|p| p.l_spatial),
        l_temporal: mean(&|p| p.l_temporal),
        l_tracklet: mean(&|p| p.l_tracklet),
        l_sema: mean(&|p| p.l_video) + l_prot,
        total: objective,
        grad_norm,
        acc: passes.iter().filter(|p| p.correct).count() as f64 / n as f64,
        adjacent_cosine: mean(&|p| p.adjacent_cosine),
        wall_ms: 0.0,
    };
    check_divergence(&report)?;
    if !grad_norm.is_finite() {
        return Err(ArtError::Divergence {
            step,
            component: "grad_norm",
            value: grad_norm,
        });
    }

    opt.apply(&cfg.optimizer, &mut model.params, &grads, lr);
    model.bank.ema_update(&sa_grad)?;
    Ok(StepReport {
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        ..report
    })
}

/// Full training run. On divergence the last good parameters are written
/// to `checkpoints/last_good` (when an output directory is set) and the
/// divergence error is returned.
pub fn train(model: &mut ArtModel, data: &[SynthSample], cfg: &TrainConfig, run: &RunOptions) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(ArtError::Config("training set is empty".into()));
    }
    cfg.validate()?;
    if let Some(dir) = &run.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut reports = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = OptimizerState::default();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(cfg.seed, "order", epoch as u64));
        let lr = cfg.lr_at_epoch(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch: Vec<&SynthSample> = chunk.iter().map(|i| &data[*i]).collect();
            let result = with_pool(run.threads, || train_step(model, &mut opt, &batch, cfg, lr, step, epoch))?;
            match result {
                Ok(r) => {
                    log::debug!("step {} total {:.6} acc {:.3}", r.step, r.total, r.acc);
                    reports.push(r);
                }
                Err(e) => {
                    if let Some(dir) = &run.out_dir {
                        save_checkpoint(model, &dir.join("checkpoints").join("last_good"), step, run.config_echo.as_ref())?;
                        write_logs(dir, &reports)?;
                    }
                    return Err(e);
                }
            }
            step += 1;
        }
    }
    let final_train_accuracy = with_pool(run.threads, || evaluate(model, data, 1))??.top1;
    if let Some(dir) = &run.out_dir {
        write_logs(dir, &reports)?;
        save_checkpoint(model, &dir.join("checkpoints").join("final"), step, run.config_echo.as_ref())?;
    }
    Ok(TrainSummary {
        reports,
        final_train_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub top1: f64,
    /// Unweighted mean of per-class Top-1 over classes present in the set.
    pub mean_class: f64,
    /// Tracking hit rate; absent when the head has no region queries.
    pub hit_rate: Option<f64>,
    /// Mean adjacent-frame response cosine; absent without region queries
    /// or with a single frame.
    pub adjacent_cosine: Option<f64>,
}

/// Top-1 and mean per-class accuracy. Classes without samples are left out
/// of the mean.
pub fn classification_metrics(preds: &[usize], labels: &[usize], n_class: usize) -> (f64, f64) {
    let n = labels.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mut hits = vec![0usize; n_class];
    let mut counts = vec![0usize; n_class];
    for (p, l) in preds.iter().zip(labels) {
        counts[*l] += 1;
        if p == l {
            hits[*l] += 1;
        }
    }
    let top1 = hits.iter().sum::<usize>() as f64 / n as f64;
    let mut per_class = Vec::new();
    for c in 0..n_class {
        if counts[c] == 0 {
            log::warn!("class {} has no evaluation samples; left out of the per-class mean", c);
        } else {
            per_class.push(hits[c] as f64 / counts[c] as f64);
        }
    }
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    (top1, mean)
}

/// Mean over queries and adjacent frame pairs of the response cosine.
pub fn adjacent_cosine(responses: &[Tensor]) -> Option<f64> {
    if responses.len() < 2 {
        return None;
    }
    let k = responses[0].dims()[0];
    let mut sum = 0.0;
    for pair in responses.windows(2) {
        for q in 0..k {
            let (a, b) = (pair[0].row(q), pair[1].row(q));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            sum += dot / (na * nb);
        }
    }
    Some(sum / (k * (responses.len() - 1)) as f64)
}

pub fn evaluate(model: &ArtModel, data: &[SynthSample], radius: usize) -> Result<EvalReport> {
    let infs = data
        .par_iter()
        .map(|s| model.infer(&s.video))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = infs.iter().map(|i| i.predicted_class()).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let (top1, mean_class) = classification_metrics(&preds, &labels, model.cfg.n_class);
    let (mut hit_rate, mut adjacent) = (None, None);
    if model.cfg.flags.rssa && !data.is_empty() {
        let (h, w) = (model.cfg.h, model.cfg.w);
        let hits: f64 = infs
            .iter()
            .zip(data)
            .map(|(inf, s)| tracking_hit_rate(&inf.attention, &s.truth, h, w, radius))
            .sum();
        hit_rate = Some(hits / data.len() as f64);
        let m: Option<Vec<f64>> = infs.iter().map(|i| adjacent_cosine(&i.responses)).collect();
        adjacent = m.map(|m| m.iter().sum::<f64>() / m.len() as f64);
    }
    Ok(EvalReport {
        n: data.len(),
        top1,
        mean_class,
        hit_rate,
        adjacent_cosine: adjacent,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub mu: f64,
    pub eta: f64,
    pub step: usize,
}

/// Writes `params/`, `bank/`, `checkpoint.json` and, when given, `config_echo.json`.
pub fn save_checkpoint(model: &ArtModel, dir: &Path, step: usize, echo: Option<&serde_json::Value>) -> Result<()> {
    fs::create_dir_all(dir)?;
    model.params.save_dir(dir.join("params"), Dtype::F64)?;
    model.bank.save_dir(&dir.join("bank"), Dtype::F64)?;
    let manifest = CheckpointManifest {
        model: model.cfg,
        mu: model.bank.mu,
        eta: model.bank.eta,
        step,
    };
    fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(echo) = echo {
        fs::write(dir.join("config_echo.json"), serde_json::to_string_pretty(echo)?)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ArtModel> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
    manifest.model.validate()?;
    let params = ParamStore::load_dir(dir.join("params"))?;
    let bank = SemanticBank::load_dir(&dir.join("bank"), manifest.mu, manifest.eta)?;
    Ok(ArtModel {
        cfg: manifest.model,
        params,
        bank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_arithmetic() {
        assert_eq!(loss_total(1.0, 1.0, 0.1, 0.2, 5.0, 5.0), 3.5);
        assert_eq!(loss_total(0.7, 1.3, 9.0, 4.0, 0.0, 0.0), 0.7 + 1.3);
    }

    #[test]
    fn perfect_predictions() {
        assert_eq!(classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3), (1.0, 1.0));
    }

    #[test]
    fn constant_prediction_scores_majority_frequency() {
        // constant logits always predict class 0 under the lowest-index rule
        let labels = [0, 0, 0, 1, 2];
        let preds = vec![argmax(&[0.3, 0.3, 0.3]); labels.len()];
        let (top1, _) = classification_metrics(&preds, &labels, 3);
        assert_eq!(top1, 0.6);
    }

    #[test]
    fn one_class_right_one_wrong() {
        let labels = [0, 0, 0, 1];
        let preds = [0, 0, 0, 0];
        let (top1, mean) = classification_metrics(&preds, &labels, 2);
        assert_eq!(top1, 0.75);
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn absent_class_is_excluded_from_mean() {
        let (_, mean) = classification_metrics(&[0, 1], &[0, 1], 3);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 0.01);
        assert_eq!(cfg.lr_at_epoch(9), 0.01);
        assert!((cfg.lr_at_epoch(10) - 0.001).abs() < 1e-18);
    }

    #[test]
    fn csv_header_and_row_width() {
        let r = StepReport {
            step: 3,
            epoch: 1,
            l_v: 1.0,
            l_con: 2.0,
            l_spatial: 0.5,
            l_temporal: 0.0,
            l_tracklet: 0.25,
            l_sema: 1.5,
            total: 14.25,
            grad_norm: 0.1,
            acc: 0.5,
            adjacent_cosine: 0.0,
            wall_ms: 12.0,
        };
        let csv = metrics_csv(std::slice::from_ref(&r));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1].split(',').count(), METRICS_HEADER.split(',').count());
        assert_eq!(r.reconstructed_total(5.0, 5.0), 1.0 + 2.0 + 5.0 * 0.75 + 5.0 * 1.5);
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig {
            gamma1: -1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_names_component() {
        let mut r = StepReport {
            step: 7,
            epoch: 0,
            l_v: 1.0,
            l_con: f64::NAN,
            l_spatial: 0.0,
            l_temporal: 0.0,
            l_tracklet: 0.0,
            l_sema: 0.0,
            total: 1.0,
            grad_norm: 0.0,
            acc: 0.0,
            adjacent_cosine: 0.0,
            wall_ms: 0.0,
        };
        match check_divergence(&r) {
            Err(ArtError::Divergence { step: 7, component: "l_con", .. }) => {}
            other => panic!("{:?}", other),
        }
        r.l_con = 0.0;
        r.total = 2e6;
        assert!(matches!(check_divergence(&r), Err(ArtError::Divergence { component: "total", .. })));
    }
}
