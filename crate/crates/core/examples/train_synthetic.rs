//! Trains the head on the planted-trajectory task and reports held-out
//! accuracy, tracking hit rate and the adjacent-frame response cosine.
//!
//! `cargo run --release --example train_synthetic -- [steps] [json overrides]`
//!
//! e.g. `-- 300 '{"seed": 3, "train": {"gamma1": 0}}'`

use art_head::config::RunConfig;
use art_head::synth;
use art_head::trainer::{self, RunOptions};

fn main() -> art_head::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(320);
    let overrides = args.next().unwrap_or_else(|| "{}".into());

    let mut cfg = RunConfig::from_json(&overrides)?.resolved();
    cfg.train.max_steps = Some(steps);
    let train = synth::generate_range(&cfg.synth, 0, cfg.data.n_train)?;
    let test = synth::generate_range(&cfg.synth, cfg.data.n_train as u64, cfg.data.n_test)?;

    let mut model = cfg.build_model()?;
    let start = std::time::Instant::now();
    let summary = trainer::train(&mut model, &train, &cfg.train, &RunOptions::default())?;
    let every = (summary.reports.len() / 10).max(1);
    for r in summary.reports.iter().step_by(every) {
        println!(
            "step {:4}  total {:8.4}  l_con {:.4}  l_v {:.4}  mtc {:+.4}  sema {:.4}  |g| {:8.3}  acc {:.2}  m {:.3}",
            r.step, r.total, r.l_con, r.l_v, r.l_mtc(), r.l_sema, r.grad_norm, r.acc, r.adjacent_cosine
        );
    }
    let eval = trainer::evaluate(&model, &test, cfg.hit_radius)?;
    println!("trained {} steps in {:.1?}", summary.reports.len(), start.elapsed());
    println!("train top1 {:.3}", summary.final_train_accuracy);
    println!("held-out top1 {:.3}  mean {:.3}", eval.top1, eval.mean_class);
    println!("hit rate {:?}  adjacent cosine {:?}", eval.hit_rate, eval.adjacent_cosine);
    Ok(())
}
