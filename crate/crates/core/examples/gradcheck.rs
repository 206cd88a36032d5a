//! Finite-difference check of every op, layer and loss, plus the full
//! training objective of a tiny model.
//!
//! `cargo run --release --example gradcheck`

use art_head::gradcheck::{self, GradcheckConfig, GRAD_TOL};

fn main() -> art_head::Result<()> {
    let reports = gradcheck::run(0, &GradcheckConfig::default())?;
    for r in &reports {
        println!(
            "{:<24} {:>6} entries  max rel err {:.3e}  {}",
            r.op,
            r.n_checked,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {} above {:e}", reports.len(), failed, GRAD_TOL);
    Ok(())
}
