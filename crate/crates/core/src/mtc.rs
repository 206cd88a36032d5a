//! Multi-level tracklet contrastive (MTC) loss.
//!
//! Three cosine-based terms over the region responses of one video:
//! spatial repulsion between queries in a frame, temporal attraction of a
//! query across adjacent frames, and repulsion between whole tracklets.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::{Graph, Var};

/// How the temporal term turns the mean adjacent-frame cosine `m` into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TemporalMode {
    /// `max(0, λ − m)`: pulls adjacent responses together until `m ≥ λ`.
    #[default]
    Hinge,
    /// `m − λ`, as printed. Minimizing it pushes adjacent responses apart.
    Literal,
}

/// Distance between two tracklets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrackletDistance {
    /// Cosine of the `T·C` flattened tracklets.
    #[default]
    FlattenCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MtcConfig {
    /// Correlated degree λ of adjacent-frame responses.
    pub lambda: f64,
    pub temporal_mode: TemporalMode,
    pub tracklet_distance: TrackletDistance,
}

impl Default for MtcConfig {
    fn default() -> Self {
        MtcConfig {
            lambda: 0.6,
            temporal_mode: TemporalMode::Hinge,
            tracklet_distance: TrackletDistance::FlattenCosine,
        }
    }
}

impl MtcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.lambda) {
            return Err(crate::ArtError::Config(format!(
                "mtc.lambda must lie in [-1, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Graph nodes of the three terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct MtcTerms {
    pub spatial: Var,
    pub temporal: Var,
    pub tracklet: Var,
    pub total: Var,
    /// Mean adjacent-frame cosine `m` (0 when `T == 1`).
    pub adjacent_cosine: f64,
}

/// Logs a degenerate-configuration warning the first time it occurs.
fn warn_once(flag: &AtomicBool, msg: &str) {
    if !flag.swap(true, Ordering::Relaxed) {
        log::warn!("{}", msg);
    }
}

static SPATIAL_K1: AtomicBool = AtomicBool::new(false);
static TEMPORAL_T1: AtomicBool = AtomicBool::new(false);
static TRACKLET_K1: AtomicBool = AtomicBool::new(false);

fn rows(g: &mut Graph, m: Var) -> std::result::Result<Vec<Var>, TensorError> {
    let k = g.dims(m)[0];
    (0..k).map(|i| g.narrow(m, 0, i, 1)).collect()
}

fn zero(g: &mut Graph) -> std::result::Result<Var, TensorError> {
    g.constant(&crate::Tensor::scalar(0.0))
}

/// Mean cosine over ordered pairs `i ≠ j` of a list of equally sized nodes.
fn mean_pairwise_cosine(g: &mut Graph, items: &[Var]) -> std::result::Result<Var, TensorError> {
    let k = items.len();
    let mut terms = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            terms.push(g.cosine(items[i], items[j])?);
        }
    }
    let s = g.add_n(&terms)?;
    // each unordered pair stands for (i, j) and (j, i)
    g.scale(s, 2.0 / (k * (k - 1)) as f64)
}

fn check_responses(g: &Graph, responses: &[Var]) -> std::result::Result<(usize, usize), TensorError> {
    let first = responses
        .first()
        .ok_or_else(|| TensorError::contract("mtc", "no frames"))?;
    let dims = g.dims(*first).to_vec();
    if dims.len() != 2 {
        return Err(TensorError::shape("mtc", format!("responses must be (K, C), got {:?}", dims)));
    }
    if responses.iter().any(|r| g.dims(*r) != dims.as_slice()) {
        return Err(TensorError::shape("mtc", "responses differ in shape across frames"));
    }
    Ok((dims[0], dims[1]))
}

/// Spatial term: mean same-frame cosine between distinct queries,
/// normalized by `T·K·(K−1)`. Returns 0 for `K == 1`.
pub fn spatial_loss(g: &mut Graph, responses: &[Var]) -> std::result::Result<Var, TensorError> {
    let (k, _) = check_responses(g, responses)?;
    if k < 2 {
        warn_once(&SPATIAL_K1, "spatial MTC term is degenerate for K = 1; contributing 0");
        return zero(g);
    }
    let mut per_frame = Vec::with_capacity(responses.len());
    for r in responses {
        let rs = rows(g, *r)?;
        per_frame.push(mean_pairwise_cosine(g, &rs)?);
    }
    let s = g.add_n(&per_frame)?;
    g.scale(s, 1.0 / responses.len() as f64)
}

/// Mean adjacent-frame cosine of each query, normalized by `K·(T−1)`.
fn adjacent_mean(g: &mut Graph, responses: &[Var]) -> std::result::Result<Var, TensorError> {
    let (k, _) = check_responses(g, responses)?;
    let t_len = responses.len();
    let per_frame: Vec<Vec<Var>> = responses
        .iter()
        .map(|r| rows(g, *r))
        .collect::<std::result::Result<_, _>>()?;
    let mut terms = Vec::with_capacity(k * (t_len - 1));
    #[allow(clippy::needless_range_loop)]
    for q in 0..k {
        for t in 0..t_len - 1 {
            terms.push(g.cosine(per_frame[t][q], per_frame[t + 1][q])?);
        }
    }
    let s = g.add_n(&terms)?;
    g.scale(s, 1.0 / (k * (t_len - 1)) as f64)
}

/// Temporal term. Returns the loss node and the mean adjacent cosine.
/// Returns 0 for `T == 1`.
pub fn temporal_loss(
    g: &mut Graph,
    responses: &[Var],
    cfg: &MtcConfig,
) -> std::result::Result<(Var, f64), TensorError> {
    check_responses(g, responses)?;
    if responses.len() < 2 {
        warn_once(&TEMPORAL_T1, "temporal MTC term is degenerate for T = 1; contributing 0");
        return Ok((zero(g)?, 0.0));
    }
    let m = adjacent_mean(g, responses)?;
    let mv = g.scalar(m);
    let loss = match cfg.temporal_mode {
        TemporalMode::Literal => g.add_scalar(m, -cfg.lambda)?,
        TemporalMode::Hinge => {
            let neg = g.scale(m, -1.0)?;
            let gap = g.add_scalar(neg, cfg.lambda)?;
            g.relu(gap)?
        }
    };
    Ok((loss, mv))
}

/// Tracklet term: mean cosine over ordered pairs of flattened tracklets.
/// Returns 0 for `K == 1`.
pub fn tracklet_loss(g: &mut Graph, tracklets: &[Var]) -> std::result::Result<Var, TensorError> {
    let first = tracklets
        .first()
        .ok_or_else(|| TensorError::contract("tracklet_loss", "no tracklets"))?;
    let dims = g.dims(*first).to_vec();
    if tracklets.iter().any(|t| g.dims(*t) != dims.as_slice()) {
        return Err(TensorError::shape("tracklet_loss", "tracklets differ in shape"));
    }
    if tracklets.len() < 2 {
        warn_once(&TRACKLET_K1, "tracklet MTC term is degenerate for K = 1; contributing 0");
        return zero(g);
    }
    mean_pairwise_cosine(g, tracklets)
}

/// `L_spatial + L_temporal + L_tracklet`, unweighted.
pub fn mtc_total(
    g: &mut Graph,
    responses: &[Var],
    tracklets: &[Var],
    cfg: &MtcConfig,
) -> std::result::Result<MtcTerms, TensorError> {
    let spatial = spatial_loss(g, responses)?;
    let (temporal, adjacent_cosine) = temporal_loss(g, responses, cfg)?;
    let tracklet = tracklet_loss(g, tracklets)?;
    let total = g.add_n(&[spatial, temporal, tracklet])?;
    Ok(MtcTerms {
        spatial,
        temporal,
        tracklet,
        total,
        adjacent_cosine,
    })
}
