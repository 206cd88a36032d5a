//! Acceptance run: one pass/fail line per criterion. The tracking criteria
//! train on `examples/configs/tracking.json`.
//!
//! Criteria 1 to 4, 8 and 9 are exact and set the exit status. Criteria 5 to
//! 7 are statistical outcomes of training (and 5 carries a wall-clock bound),
//! so they are reported without failing the run unless
//! `ART_ACCEPTANCE_STRICT=1` is set.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use art_head::bank::{ema_update, video_consistency_loss};
use art_head::config::{AblationSetting, RunConfig};
use art_head::gradcheck::{self, GradcheckConfig};
use art_head::head::tracklet::{form_tracklets, saliency_weights, unform_tracklets};
use art_head::head::{aggregate_tracklet, AggregationMode, FeatureVolume};
use art_head::mtc::{mtc_total, MtcConfig, TemporalMode};
use art_head::oracle::{self, ORACLE_TOL};
use art_head::rng::substream;
use art_head::trainer::{self, metrics_csv, EvalReport, RunOptions, TrainSummary};
use art_head::{Graph, Tensor};
use common::{max_abs_diff, randn, tiny_config};
use rand::seq::SliceRandom;
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const CASES: u64 = 200;
const STATISTICAL: [usize; 3] = [5, 6, 7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tracking_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/tracking.json");
    RunConfig::load(std::path::Path::new(path)).expect("tracking config").resolved()
}

struct Run {
    summary: TrainSummary,
    eval: EvalReport,
    secs: f64,
}

fn train_run(cfg: &RunConfig) -> Run {
    let start = Instant::now();
    let (train, test) = art_head::experiment::datasets(cfg).expect("datasets");
    let run = RunOptions {
        threads: Some(1),
        ..RunOptions::default()
    };
    let (summary, eval) = art_head::experiment::train_and_eval(cfg, &train, &test, &run).expect("training");
    Run {
        summary,
        eval,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks = oracle::run_loss_oracles(0, 1000).expect("oracles");
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_deviation).fold(0.0, f64::max);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    let pass = failed.is_empty() && checks.iter().all(|c| c.instances >= 1000) && secs < 60.0;
    outcome(
        pass,
        format!(
            "{} losses x 1000 instances, worst deviation {:.2e} (tol {:e}), {:.1} s, failed {:?}",
            checks.len(),
            worst,
            ORACLE_TOL,
            secs,
            failed
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let reports = gradcheck::run(0, &GradcheckConfig::default()).expect("gradcheck");
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op.as_str()).collect();
    let has_e2e = reports.iter().any(|r| r.op == "end_to_end");
    let pass = failed.is_empty() && has_e2e && reports.len() >= 12 && secs < 300.0;
    outcome(
        pass,
        format!(
            "{} checks incl. end_to_end, worst {} at {:.2e} (tol {:e}), {:.1} s, failed {:?}",
            reports.len(),
            worst.op,
            worst.max_rel_error,
            gradcheck::GRAD_TOL,
            secs,
            failed
        ),
    )
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_3() -> Outcome {
    let mut ema_ok = true;
    let mut bijection_ok = true;
    let mut wta_ok = true;
    for case in 0..CASES {
        let mut rng = substream(case, "prop", 100);
        let s = randn(&mut rng, &[2, 4, 6]);
        let sa = randn(&mut rng, &[2, 4, 6]);
        let grad = randn(&mut rng, &[2, 4, 6]);
        let eta = rng.gen_range(0.0..1.0);
        let (kept, _) = ema_update(&s, &sa, grad.data(), eta, 1.0).unwrap();
        let (copied, agent) = ema_update(&s, &sa, grad.data(), eta, 0.0).unwrap();
        ema_ok &= bits_equal(kept.data(), s.data()) && bits_equal(copied.data(), agent.data());

        let (t, k, c) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..8));
        let frames: Vec<Tensor> = (0..t).map(|_| randn(&mut rng, &[k, c])).collect();
        let tr = form_tracklets(&frames).unwrap();
        bijection_ok &= tr.len() == k
            && (0..k).all(|q| (0..t).all(|f| tr[q].row(f) == frames[f].row(q)))
            && unform_tracklets(&tr).unwrap() == frames;

        let x = randn(&mut rng, &[1, 5]);
        let proj = randn(&mut rng, &[6, 5]);
        let label = rng.gen_range(0..4);
        let dominated = Tensor::from_fn(&[1, 4, 6], |i| sa.index_axis0(0).data()[i]);
        let mut data = sa.data().to_vec();
        data.extend_from_slice(dominated.data());
        let extended = Tensor::new(vec![3, 4, 6], data).unwrap();
        let loss = |bank: &Tensor| {
            let mut g = Graph::new();
            let (xv, sv, pv) = (g.constant(&x).unwrap(), g.constant(bank).unwrap(), g.constant(&proj).unwrap());
            let l = video_consistency_loss(&mut g, xv, sv, pv, label).unwrap();
            g.scalar(l)
        };
        wta_ok &= loss(&sa).to_bits() == loss(&extended).to_bits();
    }

    let cfg = tiny_config();
    let mut train_cfg = cfg.train;
    train_cfg.max_steps = Some(100);
    train_cfg.batch_size = 2;
    train_cfg.epochs = 100;
    let (data, _) = art_head::experiment::datasets(&cfg).unwrap();
    let mut model = cfg.build_model().unwrap();
    let s0 = model.bank.s0().clone();
    let summary = trainer::train(&mut model, &data, &train_cfg, &RunOptions::default()).unwrap();
    let s0_ok = summary.reports.len() == 100 && bits_equal(model.bank.s0().data(), s0.data());

    outcome(
        ema_ok && s0_ok && wta_ok && bijection_ok,
        format!(
            "ema mu=1/mu=0 bit-exact {}, S0 fixed over {} steps {}, WTA dominated prompt {}, tracklet bijection {}",
            ema_ok,
            summary.reports.len(),
            s0_ok,
            wta_ok,
            bijection_ok
        ),
    )
}

fn mtc_value(frames: &[Tensor], cfg: &MtcConfig) -> f64 {
    let mut g = Graph::new();
    let rv: Vec<_> = frames.iter().map(|f| g.constant(f).unwrap()).collect();
    let tv: Vec<_> = form_tracklets(frames).unwrap().iter().map(|f| g.constant(f).unwrap()).collect();
    let m = mtc_total(&mut g, &rv, &tv, cfg).unwrap();
    g.scalar(m.total)
}

fn spatial_permutation_deviation(seed: u64) -> f64 {
    let mut cfg = tiny_config().with_seed(seed);
    cfg.model.positional_embedding = false;
    let model = cfg.build_model().unwrap();
    let (t, h, w, c) = (cfg.model.t, cfg.model.h, cfg.model.w, cfg.model.c);
    let hw = h * w;
    let mut rng = substream(seed, "prop", 101);
    let video = randn(&mut rng, &[t, h, w, c]);
    let mut perm: Vec<usize> = (0..hw).collect();
    perm.shuffle(&mut rng);
    let permuted = Tensor::from_fn(&[t, h, w, c], |i| {
        let (frame, rest) = (i / (hw * c), i % (hw * c));
        video.data()[(frame * hw + perm[rest / c]) * c + rest % c]
    });
    let a = model.infer(&FeatureVolume::new(video).unwrap()).unwrap();
    let b = model.infer(&FeatureVolume::new(permuted).unwrap()).unwrap();
    if a.topk != b.topk {
        return f64::INFINITY;
    }
    a.responses
        .iter()
        .zip(&b.responses)
        .map(|(x, y)| max_abs_diff(x.data(), y.data()))
        .fold(0.0, f64::max)
}

fn criterion_4() -> Outcome {
    let (mut spatial, mut query, mut shift, mut scale) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for case in 0..CASES {
        if case < 32 {
            spatial = spatial.max(spatial_permutation_deviation(case));
        }
        let mut rng = substream(case, "prop", 102);
        let (t, k, c) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..8));
        let frames: Vec<Tensor> = (0..t).map(|_| randn(&mut rng, &[k, c])).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Tensor> = frames
            .iter()
            .map(|f| Tensor::from_rows(&perm.iter().map(|i| f.row(*i).to_vec()).collect::<Vec<_>>()).unwrap())
            .collect();
        for mode in [TemporalMode::Hinge, TemporalMode::Literal] {
            let cfg = MtcConfig {
                temporal_mode: mode,
                ..MtcConfig::default()
            };
            query = query.max((mtc_value(&frames, &cfg) - mtc_value(&permuted, &cfg)).abs());
        }

        let scales: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..100.0)).collect();
        let scaled: Vec<Tensor> = frames
            .iter()
            .map(|f| Tensor::from_fn(&[k, c], |i| f.data()[i] * scales[i / c]))
            .collect();
        let cfg = MtcConfig::default();
        scale = scale.max((mtc_value(&frames, &cfg) - mtc_value(&scaled, &cfg)).abs());

        let n = rng.gen_range(1..4);
        let tr = randn(&mut rng, &[t, c]);
        let sem = randn(&mut rng, &[n, c]);
        let a: f64 = rng.gen_range(-3.0..3.0);
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let widen = |m: &Tensor, rows: usize, extra: &dyn Fn(usize) -> f64| {
            Tensor::from_fn(&[rows, c + 1], |i| {
                let (r, col) = (i / (c + 1), i % (c + 1));
                if col == c {
                    extra(r)
                } else {
                    m.data()[r * c + col]
                }
            })
        };
        let tr_ext = widen(&tr, t, &|_| a);
        let sem_ext = widen(&sem, n, &|r| b[r]);
        let mut g = Graph::new();
        let (tv, sv) = (g.constant(&tr).unwrap(), g.constant(&sem).unwrap());
        let (te, se) = (g.constant(&tr_ext).unwrap(), g.constant(&sem_ext).unwrap());
        let w0 = saliency_weights(&mut g, tv, sv).unwrap();
        let w1 = saliency_weights(&mut g, te, se).unwrap();
        shift = shift.max(max_abs_diff(g.value(w0), g.value(w1)));
        for mode in [AggregationMode::Literal, AggregationMode::Normalized] {
            let a0 = aggregate_tracklet(&mut g, tv, sv, mode).unwrap();
            let a1 = aggregate_tracklet(&mut g, te, se, mode).unwrap();
            shift = shift.max(max_abs_diff(g.value(a0), &g.value(a1)[..c]));
        }
    }
    outcome(
        spatial <= 1e-6 && query <= 1e-9 && shift <= 1e-9 && scale <= 1e-9,
        format!(
            "spatial perm {:.2e} (<=1e-6), query perm {:.2e}, softmax shift {:.2e}, cosine scale {:.2e} (<=1e-9)",
            spatial, query, shift, scale
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn main() -> ExitCode {
    let mut lines: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {}: {}  {}", n, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());

    let base = tracking_config();
    let dims_ok = (base.model.t, base.model.h, base.model.w, base.model.c, base.model.k) == (8, 8, 8, 16, 2)
        && base.model.n_class == 4
        && base.data.n_train == 512
        && base.train.max_steps.is_some_and(|s| s <= 2000);
    let full: Vec<Run> = SEEDS
        .iter()
        .map(|&s| train_run(&base.with_seed(s).with_setting(AblationSetting::Full)))
        .collect();
    let ta: Vec<Run> = SEEDS
        .iter()
        .map(|&s| train_run(&base.with_seed(s).with_setting(AblationSetting::RssaSseTa)))
        .collect();
    let baseline: Vec<Run> = SEEDS
        .iter()
        .map(|&s| train_run(&base.with_seed(s).with_setting(AblationSetting::Baseline)))
        .collect();

    // seed 0 is the tracking run; the TA setting is the same head with gamma1 = 0
    let hit = full[0].eval.hit_rate.unwrap_or(0.0);
    let hit_g0 = ta[0].eval.hit_rate.unwrap_or(0.0);
    report(
        5,
        outcome(
            dims_ok && hit >= 0.8 && hit >= hit_g0 && full[0].secs < 600.0,
            format!(
                "hit rate {:.4} (>=0.8), gamma1=0 {:.4}, {} steps in {:.1} s; seeds 1, 2: {:.4}, {:.4}",
                hit,
                hit_g0,
                full[0].summary.reports.len(),
                full[0].secs,
                full[1].eval.hit_rate.unwrap_or(0.0),
                full[2].eval.hit_rate.unwrap_or(0.0)
            ),
        ),
    );

    let top1 = |runs: &[Run]| runs.iter().map(|r| r.eval.top1).collect::<Vec<_>>();
    let (f, t, b) = (mean(&top1(&full)), mean(&top1(&ta)), mean(&top1(&baseline)));
    report(
        6,
        outcome(
            f >= t && t >= b && b < 1.0,
            format!(
                "mean held-out top1 full {:.4} {:?}, +rssa+sse+ta {:.4} {:?}, baseline {:.4} {:?}",
                f,
                top1(&full),
                t,
                top1(&ta),
                b,
                top1(&baseline)
            ),
        ),
    );

    let mut literal_cfg = base.with_setting(AblationSetting::Full);
    literal_cfg.train.mtc.temporal_mode = TemporalMode::Literal;
    let literal = train_run(&literal_cfg);
    let m_hinge = full[0].eval.adjacent_cosine.unwrap_or(f64::NAN);
    let m_literal = literal.eval.adjacent_cosine.unwrap_or(f64::NAN);
    let lambda_ok = base.train.mtc.lambda == 0.6 && base.train.mtc.temporal_mode == TemporalMode::Hinge;
    report(
        7,
        outcome(
            lambda_ok && (0.45..=1.0).contains(&m_hinge) && m_literal < m_hinge,
            format!("hinge m {:.4} in [0.45, 1], literal m {:.4}", m_hinge, m_literal),
        ),
    );

    let again = train_run(&base.with_setting(AblationSetting::Full));
    let (csv_a, csv_b) = (metrics_csv(&full[0].summary.reports), metrics_csv(&again.summary.reports));
    report(
        8,
        outcome(
            csv_a == csv_b,
            format!("two single-thread runs, {} metrics bytes, identical {}", csv_a.len(), csv_a == csv_b),
        ),
    );

    // the default weights gamma1 = gamma2 = 5 without warm-up
    let mut weighted = base.clone();
    weighted.train.gamma1 = 5.0;
    weighted.train.gamma2 = 5.0;
    weighted.train.mtc_warmup = 0;
    weighted.train.max_steps = Some(300);
    let run = train_run(&weighted);
    let worst = run
        .summary
        .reports
        .iter()
        .map(|r| (r.total - (r.l_v + r.l_con + 5.0 * r.l_mtc() + 5.0 * r.l_sema)).abs())
        .fold(0.0, f64::max);
    report(
        9,
        outcome(
            worst <= 1e-6 && !run.summary.reports.is_empty(),
            format!("{} steps, worst |total - sum| {:.2e} (<=1e-6)", run.summary.reports.len(), worst),
        ),
    );

    let failed: Vec<usize> = lines.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("failed: {:?}", failed);
    let strict = std::env::var("ART_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict || failed.iter().any(|n| !STATISTICAL.contains(n)) {
        ExitCode::FAILURE
    } else {
        println!("only statistical criteria failed; exit status left at success");
        ExitCode::SUCCESS
    }
}
