//! Attention-map and tracklet export.
//!
//! Writes one `H×W` CSV grid per frame per query, the tracklets as ARTT
//! tensors, and an `index.json` listing everything.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{Inference, ModelConfig};
use crate::error::Result;
use crate::tensor::io::{self, Dtype};

#[derive(Debug, Serialize)]
pub struct InspectIndex {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub topk: Vec<usize>,
    pub predicted_class: usize,
    pub attention: Vec<AttentionEntry>,
    pub tracklets: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct AttentionEntry {
    pub frame: usize,
    pub query: usize,
    pub file: String,
    /// Grid cell `(row, col)` with the most attention.
    pub argmax: (usize, usize),
}

pub fn attention_grid_csv(weights: &[f64], h: usize, w: usize) -> String {
    let mut s = String::new();
    for r in 0..h {
        let row: Vec<String> = weights[r * w..(r + 1) * w]
            .iter()
            .map(|v| format!("{:.9e}", v))
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn export(inf: &Inference, cfg: &ModelConfig, dir: &Path) -> Result<InspectIndex> {
    fs::create_dir_all(dir)?;
    let (h, w) = (cfg.h, cfg.w);
    let hw = h * w;
    let mut attention = Vec::new();
    for (frame, attn) in inf.attention.iter().enumerate() {
        for query in 0..attn.len() / hw {
            let weights = &attn[query * hw..(query + 1) * hw];
            let file = format!("attn_t{:03}_q{}.csv", frame, query);
            fs::write(dir.join(&file), attention_grid_csv(weights, h, w))?;
            let cell = super::argmax(weights);
            attention.push(AttentionEntry {
                frame,
                query,
                file,
                argmax: (cell / w, cell % w),
            });
        }
    }
    let mut tracklets = Vec::new();
    for (k, tr) in inf.tracklets.iter().enumerate() {
        let file = format!("tracklet_{}.artt", k);
        io::save(dir.join(&file), tr, Dtype::F64)?;
        tracklets.push(file);
    }
    let index = InspectIndex {
        t: inf.attention.len(),
        h,
        w,
        k: inf.tracklets.len(),
        topk: inf.topk.clone(),
        predicted_class: inf.predicted_class(),
        attention,
        tracklets,
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_h_rows_of_w_values() {
        let csv = attention_grid_csv(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 2, 3);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split(',').count(), 3);
        let v: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
        assert!((v - 0.4).abs() < 1e-12);
    }
}
