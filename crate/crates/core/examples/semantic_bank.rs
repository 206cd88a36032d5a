//! The two-copy semantic bank: the agent `Sa` takes gradient steps, the
//! momentum copy `S` follows it, and `S0` never moves.
//!
//! `cargo run --release --example semantic_bank -- [mu]`

use art_head::bank::{synthetic_bank, SemanticBank};
use art_head::rng::substream;
use rand::Rng;
use rand_distr::StandardNormal;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn main() -> art_head::Result<()> {
    let mu: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let mut bank = SemanticBank::new(synthetic_bank(3, 4, 16, 0, 0.1), mu, 0.05)?;
    let mut rng = substream(0, "bank", 0);
    for step in 1..=50 {
        let grad: Vec<f64> = (0..bank.sa.numel()).map(|_| rng.sample(StandardNormal)).collect();
        bank.ema_update(&grad)?;
        if step % 10 == 0 {
            println!(
                "step {:2}  |Sa - S0| {:.4}  |S - S0| {:.4}  |S - Sa| {:.4}",
                step,
                dist(bank.sa.data(), bank.s0().data()),
                dist(bank.s.data(), bank.s0().data()),
                dist(bank.s.data(), bank.sa.data())
            );
        }
    }
    Ok(())
}
