//! Trains briefly, then exports attention grids and tracklets for one
//! held-out video and compares each query's attention peak with the planted
//! part positions.
//!
//! `cargo run --release --example inspect_attention -- [steps] [out_dir]`

use art_head::config::RunConfig;
use art_head::head::inspect;
use art_head::synth;
use art_head::trainer::{self, RunOptions};

fn main() -> art_head::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: Option<usize> = args.next().and_then(|s| s.parse().ok());
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("art_inspect_example"));
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/tracking.json");
    let mut cfg = RunConfig::load(std::path::Path::new(path))?.resolved();
    if steps.is_some() {
        cfg.train.max_steps = steps;
    }

    let train = synth::generate_range(&cfg.synth, 0, cfg.data.n_train)?;
    let sample = synth::generate_one(&cfg.synth, &cfg.synth.signatures(), cfg.data.n_train as u64)?;
    let mut model = cfg.build_model()?;
    trainer::train(&mut model, &train, &cfg.train, &RunOptions::default())?;

    let index = inspect::export(&model.infer(&sample.video)?, &model.cfg, &out)?;
    println!("label {}  predicted {}  selected classes {:?}", sample.label, index.predicted_class, index.topk);
    for e in &index.attention {
        let truth: Vec<_> = sample.truth.iter().map(|track| track[e.frame]).collect();
        println!("frame {} query {}  peak {:?}  parts at {:?}", e.frame, e.query, e.argmax, truth);
    }
    println!("wrote {} grids and {} tracklets to {}", index.attention.len(), index.tracklets.len(), out.display());
    Ok(())
}
