//! Generates planted-trajectory videos, prints one ground-truth track and
//! round-trips a small set through the on-disk format.
//!
//! `cargo run --release --example synth_dataset -- [out_dir]`

use art_head::config::RunConfig;
use art_head::synth;

fn main() -> art_head::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("art_synth_example"));
    let cfg = RunConfig::default().resolved().synth;
    let samples = synth::generate(&cfg, 8)?;
    let s = &samples[0];
    println!("video {} label {}  dims {:?}", s.index, s.label, s.video.tensor().dims());
    for (p, track) in s.truth.iter().enumerate() {
        println!("part {} cells {:?}", p, track);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    println!("labels {:?}", labels);

    synth::write_dataset(&samples, &cfg, &out)?;
    let (_, back) = synth::read_dataset(&out)?;
    let same = back.iter().zip(&samples).all(|(a, b)| a.video == b.video && a.truth == b.truth);
    println!("wrote {} videos to {}, round trip exact: {}", back.len(), out.display(), same);
    Ok(())
}
