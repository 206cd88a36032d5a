//! Planted-trajectory benchmark.
//!
//! Each synthetic video is a `(T, H, W, C)` feature volume of Gaussian
//! background noise with `n_parts` planted part signatures. Every part
//! starts at the centre of its own column lane and drifts along the motion
//! axis; bit `p` of the class index sets the direction of part `p`, so the
//! class is only recoverable by following every part. Signatures, layout and
//! global feature statistics are identical across classes, so a globally
//! pooled token carries no class information.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ArtError, Result};
use crate::head::FeatureVolume;
use crate::rng::substream;
use crate::tensor::io::{self, Dtype};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n_parts: usize,
    pub n_classes: usize,
    pub signature_strength: f64,
    pub noise_sigma: f64,
    /// Drift speed in cells per frame.
    pub speed: f64,
    /// Motion axis in radians from the column axis; `π/2` is vertical.
    pub axis_angle: f64,
    /// Per-frame Gaussian wobble added to the drift, in cells.
    pub walk_sigma: f64,
    /// Half-width of the uniform start box around the grid centre.
    pub start_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            t: 8,
            h: 8,
            w: 8,
            c: 16,
            n_parts: 2,
            n_classes: 4,
            signature_strength: 3.0,
            noise_sigma: 0.5,
            speed: 0.5,
            axis_angle: PI / 2.0,
            walk_sigma: 0.15,
            start_jitter: 0.5,
            seed: 0,
        }
    }
}

/// One labelled video with its planted positions, `truth[part][frame] = (row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub index: u64,
    pub video: FeatureVolume,
    pub label: usize,
    pub truth: Vec<Vec<(usize, usize)>>,
}

impl SynthConfig {
    /// Inclusive `(row, col)` ranges of part `p`'s lane.
    fn lane(&self, p: usize) -> ((f64, f64), (f64, f64)) {
        let width = self.w / self.n_parts;
        let lo = p * width;
        (
            (0.0, self.h as f64 - 1.0),
            (lo as f64, (lo + width) as f64 - 1.0),
        )
    }

    /// Heading of part `p` for class `label`: bit `p` of the label flips it.
    pub fn heading(&self, label: usize, p: usize) -> f64 {
        self.axis_angle + if (label >> p) & 1 == 1 { PI } else { 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t", self.t),
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("n_parts", self.n_parts),
            ("n_classes", self.n_classes),
        ] {
            if v == 0 {
                return Err(ArtError::Config(format!("synth.{} must be positive", name)));
            }
        }
        if self.n_parts > self.c {
            return Err(ArtError::Config(format!(
                "{} orthonormal signatures do not fit in {} channels",
                self.n_parts, self.c
            )));
        }
        let finite = [
            self.signature_strength,
            self.noise_sigma,
            self.speed,
            self.walk_sigma,
            self.start_jitter,
            self.axis_angle,
        ];
        if finite.iter().any(|v| !v.is_finite())
            || self.noise_sigma < 0.0
            || self.speed < 0.0
            || self.walk_sigma < 0.0
            || self.start_jitter < 0.0
        {
            return Err(ArtError::Config(
                "synth amplitudes must be finite and noise, speed, wobble and jitter >= 0".into(),
            ));
        }
        if self.n_parts < usize::BITS as usize && self.n_classes > 1 << self.n_parts {
            return Err(ArtError::Config(format!(
                "{} parts with two directions each distinguish at most {} classes, not {}",
                self.n_parts,
                1usize << self.n_parts,
                self.n_classes
            )));
        }
        if self.w < self.n_parts {
            return Err(ArtError::Config(format!(
                "{} lanes do not fit a grid {} wide",
                self.n_parts, self.w
            )));
        }
        let ((rlo, rhi), (clo, chi)) = self.lane(0);
        let free = (rhi - rlo).max(chi - clo);
        if self.speed > free {
            return Err(ArtError::Config(format!(
                "infeasible trajectory: speed {} exceeds the {} free cells",
                self.speed, free
            )));
        }
        Ok(())
    }

    /// Fixed orthonormal signatures `(n_parts, C)`, shared by every sample.
    pub fn signatures(&self) -> Vec<Vec<f64>> {
        let mut rng = substream(self.seed, "signatures", 0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.n_parts);
        while basis.len() < self.n_parts {
            let mut v: Vec<f64> = (0..self.c).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        basis
    }
}

/// Folds `x` back into `[lo, hi]` as if reflected at both walls.
fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let y = (x - lo).rem_euclid(2.0 * span);
    lo + if y > span { 2.0 * span - y } else { y }
}

/// Sample `index` of the dataset; a pure function of `(cfg, index)`.
pub fn generate_one(cfg: &SynthConfig, signatures: &[Vec<f64>], index: u64) -> Result<SynthSample> {
    let mut rng = substream(cfg.seed, "data", index);
    let label = (index % cfg.n_classes as u64) as usize;
    let walk = Normal::new(0.0, cfg.walk_sigma).map_err(|e| ArtError::Config(e.to_string()))?;
    let mut truth = Vec::with_capacity(cfg.n_parts);
    for p in 0..cfg.n_parts {
        let ((rlo, rhi), (clo, chi)) = cfg.lane(p);
        let mut jitter = || {
            if cfg.start_jitter > 0.0 {
                rng.gen_range(-cfg.start_jitter..=cfg.start_jitter)
            } else {
                0.0
            }
        };
        let mut r = (rlo + rhi) / 2.0 + jitter();
        let mut c = (clo + chi) / 2.0 + jitter();
        let theta = cfg.heading(label, p);
        let (dr, dc) = (-cfg.speed * theta.sin(), cfg.speed * theta.cos());
        let mut path = Vec::with_capacity(cfg.t);
        for frame in 0..cfg.t {
            if frame > 0 {
                r += dr;
                c += dc;
                if cfg.walk_sigma > 0.0 {
                    r += walk.sample(&mut rng);
                    c += walk.sample(&mut rng);
                }
            }
            path.push((
                reflect(r, rlo, rhi).round() as usize,
                reflect(c, clo, chi).round() as usize,
            ));
        }
        truth.push(path);
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| ArtError::Config(e.to_string()))?;
    let mut x = Tensor::from_fn(&[cfg.t, cfg.h, cfg.w, cfg.c], |_| {
        if cfg.noise_sigma == 0.0 {
            0.0
        } else {
            noise.sample(&mut rng)
        }
    });
    let data = x.data_mut();
    for (p, path) in truth.iter().enumerate() {
        for (frame, (row, col)) in path.iter().enumerate() {
            let base = ((frame * cfg.h + row) * cfg.w + col) * cfg.c;
            for ch in 0..cfg.c {
                data[base + ch] += cfg.signature_strength * signatures[p][ch];
            }
        }
    }
    Ok(SynthSample {
        index,
        video: FeatureVolume::new(x)?,
        label,
        truth,
    })
}

/// Samples `start .. start + n`. Disjoint index ranges give disjoint splits.
pub fn generate_range(cfg: &SynthConfig, start: u64, n: usize) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let sig = cfg.signatures();
    (start..start + n as u64)
        .map(|i| generate_one(cfg, &sig, i))
        .collect()
}

pub fn generate(cfg: &SynthConfig, n: usize) -> Result<Vec<SynthSample>> {
    generate_range(cfg, 0, n)
}

/// Every injective assignment of `parts` parts to `queries` queries, as
/// `assignment[part] = query`.
fn assignments(parts: usize, queries: usize) -> Vec<Vec<usize>> {
    fn rec(parts: usize, queries: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == parts {
            out.push(cur.clone());
            return;
        }
        for q in 0..queries {
            if !cur.contains(&q) {
                cur.push(q);
                rec(parts, queries, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(parts, queries, &mut Vec::new(), &mut out);
    out
}

/// Fraction of `(frame, part)` pairs whose assigned query's attention argmax
/// lies within Chebyshev distance `radius` of the planted cell.
///
/// `attention[t]` is a row-major `(K, H·W)` map. The part-to-query
/// assignment is chosen once, over all frames, to maximize hits. With fewer
/// queries than parts the unmatched parts count as misses.
pub fn tracking_hit_rate(
    attention: &[Vec<f64>],
    truth: &[Vec<(usize, usize)>],
    h: usize,
    w: usize,
    radius: usize,
) -> f64 {
    let hw = h * w;
    let t_len = attention.len();
    let k = attention.first().map_or(0, |a| a.len() / hw);
    let parts = truth.len();
    if t_len == 0 || parts == 0 || k == 0 {
        return 0.0;
    }
    // hit[q][p] = frames where query q lands on part p
    let mut hit = vec![vec![0usize; parts]; k];
    for (frame, attn) in attention.iter().enumerate() {
        for (q, row) in hit.iter_mut().enumerate() {
            let cell = crate::head::argmax(&attn[q * hw..(q + 1) * hw]);
            let (ar, ac) = (cell / w, cell % w);
            for (p, path) in truth.iter().enumerate() {
                let (tr, tc) = path[frame];
                if ar.abs_diff(tr) <= radius && ac.abs_diff(tc) <= radius {
                    row[p] += 1;
                }
            }
        }
    }
    let best = if k >= parts {
        assignments(parts, k)
            .into_iter()
            .map(|a| a.iter().enumerate().map(|(p, q)| hit[*q][p]).sum::<usize>())
            .max()
    } else {
        assignments(k, parts)
            .into_iter()
            .map(|a| a.iter().enumerate().map(|(q, p)| hit[q][*p]).sum::<usize>())
            .max()
    }
    .unwrap_or(0);
    best as f64 / (t_len * parts) as f64
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: u64,
    pub file: String,
    pub label: usize,
    pub truth: Vec<Vec<(usize, usize)>>,
}

/// Writes each video as `sample_{index}.artt` plus `manifest.json`.
pub fn write_dataset(samples: &[SynthSample], cfg: &SynthConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let file = format!("sample_{:06}.artt", s.index);
        io::save(dir.join(&file), s.video.tensor(), Dtype::F64)?;
        entries.push(SampleEntry {
            index: s.index,
            file,
            label: s.label,
            truth: s.truth.clone(),
        });
    }
    let manifest = DatasetManifest {
        config: *cfg,
        samples: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(SynthConfig, Vec<SynthSample>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let samples = manifest
        .samples
        .into_iter()
        .map(|e| {
            let video = FeatureVolume::new(io::load(dir.join(&e.file))?)?;
            Ok(SynthSample {
                index: e.index,
                video,
                label: e.label,
                truth: e.truth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest.config, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_samples() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 3).unwrap(), generate(&cfg, 3).unwrap());
        let other = SynthConfig { seed: 1, ..cfg };
        assert_ne!(generate(&cfg, 1).unwrap(), generate(&other, 1).unwrap());
    }

    #[test]
    fn clean_planting() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            signature_strength: 1.0,
            ..SynthConfig::default()
        };
        let sig = cfg.signatures();
        let s = generate_one(&cfg, &sig, 5).unwrap();
        let x = s.video.tensor().data();
        for frame in 0..cfg.t {
            for row in 0..cfg.h {
                for col in 0..cfg.w {
                    let base = ((frame * cfg.h + row) * cfg.w + col) * cfg.c;
                    let cell = &x[base..base + cfg.c];
                    let part = (0..cfg.n_parts).find(|p| s.truth[*p][frame] == (row, col));
                    match part {
                        Some(p) => {
                            let dot: f64 = cell.iter().zip(&sig[p]).map(|(a, b)| a * b).sum();
                            let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                            assert!((dot / n - 1.0).abs() < 1e-12);
                        }
                        None => assert!(cell.iter().all(|v| *v == 0.0)),
                    }
                }
            }
        }
    }

    #[test]
    fn labels_cover_all_classes_and_positions_stay_on_grid() {
        let cfg = SynthConfig::default();
        let samples = generate(&cfg, 100).unwrap();
        let mut seen = [false; 4];
        for s in &samples {
            assert!(s.label < 4);
            seen[s.label] = true;
            assert_eq!(s.truth.len(), cfg.n_parts);
            for path in &s.truth {
                assert_eq!(path.len(), cfg.t);
                assert!(path.iter().all(|(r, c)| *r < cfg.h && *c < cfg.w));
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn signatures_are_orthonormal() {
        let cfg = SynthConfig {
            n_parts: 3,
            ..SynthConfig::default()
        };
        let s = cfg.signatures();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = s[i].iter().zip(&s[j]).map(|(a, b)| a * b).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planted_cell_is_unique_correlation_maximizer_without_noise() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..SynthConfig::default()
        };
        let sig = cfg.signatures();
        let s = generate_one(&cfg, &sig, 11).unwrap();
        let x = s.video.tensor().data();
        for (p, path) in s.truth.iter().enumerate() {
            for (frame, &(tr, tc)) in path.iter().enumerate() {
                let mut best = (f64::NEG_INFINITY, 0);
                let mut count_best = 0;
                for cell in 0..cfg.h * cfg.w {
                    let base = (frame * cfg.h * cfg.w + cell) * cfg.c;
                    let corr: f64 = x[base..base + cfg.c].iter().zip(&sig[p]).map(|(a, b)| a * b).sum();
                    if corr > best.0 {
                        best = (corr, cell);
                        count_best = 1;
                    } else if corr == best.0 {
                        count_best += 1;
                    }
                }
                assert_eq!(best.1, tr * cfg.w + tc);
                assert_eq!(count_best, 1);
            }
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let fast = SynthConfig {
            speed: 9.0,
            ..SynthConfig::default()
        };
        assert!(matches!(fast.validate(), Err(ArtError::Config(_))));
        let crowded = SynthConfig {
            n_parts: 9,
            ..SynthConfig::default()
        };
        assert!(crowded.validate().is_err());
        let too_many_classes = SynthConfig {
            n_classes: 5,
            ..SynthConfig::default()
        };
        assert!(too_many_classes.validate().is_err());
    }

    #[test]
    fn reflect_folds_into_range() {
        assert_eq!(reflect(4.0, 0.0, 3.0), 2.0);
        assert_eq!(reflect(-1.0, 0.0, 3.0), 1.0);
        assert_eq!(reflect(2.0, 0.0, 3.0), 2.0);
        assert_eq!(reflect(7.5, 0.0, 3.0), 1.5);
    }

    #[test]
    fn class_bits_set_each_part_direction() {
        let cfg = SynthConfig {
            walk_sigma: 0.0,
            start_jitter: 0.0,
            ..SynthConfig::default()
        };
        let sig = cfg.signatures();
        for label in 0..4u64 {
            let s = generate_one(&cfg, &sig, label).unwrap();
            for p in 0..2 {
                let (r0, c0) = s.truth[p][0];
                let (r3, c3) = s.truth[p][3];
                assert_eq!(c0, c3);
                // bit clear: up (rows decrease); bit set: down
                if (label >> p) & 1 == 0 {
                    assert!(r3 < r0, "label {} part {}", label, p);
                } else {
                    assert!(r3 > r0, "label {} part {}", label, p);
                }
                assert_eq!(c0 / 4, p);
            }
        }
    }

    fn one_hot_maps(cells: &[[usize; 2]], hw: usize) -> Vec<Vec<f64>> {
        // cells[t] = argmax cell of each of two queries at frame t
        cells
            .iter()
            .map(|qs| {
                let mut v = vec![0.0; 2 * hw];
                for (q, c) in qs.iter().enumerate() {
                    v[q * hw + c] = 1.0;
                }
                v
            })
            .collect()
    }

    #[test]
    fn hit_rate_examples() {
        let (h, w) = (4, 4);
        let truth = vec![vec![(0, 0), (1, 1)], vec![(3, 3), (2, 2)]];
        let perfect = one_hot_maps(&[[0, 15], [5, 10]], 16);
        assert_eq!(tracking_hit_rate(&perfect, &truth, h, w, 1), 1.0);
        // swapped query identities are resolved by the assignment
        let swapped = one_hot_maps(&[[15, 0], [10, 5]], 16);
        assert_eq!(tracking_hit_rate(&swapped, &truth, h, w, 0), 1.0);
        let far = one_hot_maps(&[[3, 12], [3, 12]], 16);
        assert_eq!(tracking_hit_rate(&far, &truth, h, w, 1), 0.0);
        let half = one_hot_maps(&[[0, 15], [3, 12]], 16);
        assert_eq!(tracking_hit_rate(&half, &truth, h, w, 0), 0.5);
        // one query on part 1 for both frames: half the (frame, part) pairs
        let single: Vec<Vec<f64>> = [15, 10]
            .iter()
            .map(|c| (0..16).map(|i| if i == *c { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(tracking_hit_rate(&single, &truth, h, w, 0), 0.5);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SynthConfig::default();
        let samples = generate(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&samples, &cfg, dir.path()).unwrap();
        let (cfg2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, samples);
    }
}
