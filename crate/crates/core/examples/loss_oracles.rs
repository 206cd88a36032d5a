//! Every loss, both aggregation modes and cross-attention against plain loop
//! implementations on random small instances.
//!
//! `cargo run --release --example loss_oracles -- [instances] [seed]`

use art_head::oracle::{run_loss_oracles, ORACLE_TOL};

fn main() -> art_head::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = std::time::Instant::now();
    let checks = run_loss_oracles(seed, instances)?;
    for c in &checks {
        println!("{:<24} {:>6} instances  max deviation {:.3e}", c.name, c.instances, c.max_deviation);
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    println!("{} above {:e}, {:.1?}", failed, ORACLE_TOL, start.elapsed());
    Ok(())
}
