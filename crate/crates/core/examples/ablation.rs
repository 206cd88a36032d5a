//! Component ablation plus the K and lambda sweeps on a reduced budget.
//!
//! `cargo run --release --example ablation -- [steps] [json overrides]`

use art_head::config::RunConfig;
use art_head::experiment::{ablation_csv, ablation_grid, AblateConfig};

fn main() -> art_head::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let overrides = args.next().unwrap_or_else(|| "{}".into());
    let mut cfg = RunConfig::from_json(&overrides)?.resolved();
    cfg.train.max_steps = Some(steps);
    let start = std::time::Instant::now();
    let rows = ablation_grid(&cfg, &AblateConfig::default(), None);
    print!("{}", ablation_csv(&rows));
    println!("{} cells in {:.1?}", rows.len(), start.elapsed());
    Ok(())
}
