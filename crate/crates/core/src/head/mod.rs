//! The action-region tracking head.
//!
//! Per video: a class token is pooled from the feature volume, the top-K
//! bank semantics are selected against it, every frame is enhanced by
//! self-attention over `[tokens; semantics]` (SSE), region queries
//! `P + Ŝ_t` cross-attend to the enhanced tokens (RSSA), the per-frame
//! responses are re-indexed into tracklets, aggregated with temporal
//! saliency, and fed to the two prediction heads.

pub mod inspect;
pub mod tracklet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDims, AttentionStack, LayerKind, PositionalEmbedding};
use crate::bank::{self, SemanticBank};
use crate::error::{ArtError, Result, StageExt, TensorError};
use crate::params::{normal_init, xavier, Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub use tracklet::{aggregate_tracklet, form_tracklets, AggregationMode};

const LN_EPS: f64 = 1e-5;

/// Which parts of the head are active. The five settings of the component
/// ablation are expressible with these flags plus the MTC weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadFlags {
    /// Region queries, cross-attention and tracklets. Off = class token only.
    pub rssa: bool,
    /// Self-attention enhancement of frame tokens before cross-attention.
    pub sse: bool,
    /// Saliency-weighted aggregation; off = temporal mean pooling.
    pub saliency_aggregation: bool,
}

impl Default for HeadFlags {
    fn default() -> Self {
        HeadFlags {
            rssa: true,
            sse: true,
            saliency_aggregation: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Number of region queries (tracklets).
    pub k: usize,
    /// Latent width of the attention projections.
    pub d: usize,
    pub heads: usize,
    pub depth_sse: usize,
    pub depth_rssa: usize,
    pub ffn_mult: usize,
    pub n_class: usize,
    pub positional_embedding: bool,
    /// Standard deviation of the initial region prompts.
    pub prompt_init_std: f64,
    pub aggregation: AggregationMode,
    pub flags: HeadFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t: 16,
            h: 8,
            w: 8,
            c: 64,
            k: 2,
            d: 256,
            heads: 4,
            depth_sse: 4,
            depth_rssa: 4,
            ffn_mult: 2,
            n_class: 4,
            positional_embedding: true,
            prompt_init_std: 1.0,
            aggregation: AggregationMode::Literal,
            flags: HeadFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn tokens_per_frame(&self) -> usize {
        self.h * self.w
    }

    /// Width of `Concat(x_cls, Tr_1^agg, …, Tr_K^agg)`.
    pub fn concat_dim(&self) -> usize {
        if self.flags.rssa {
            (1 + self.k) * self.c
        } else {
            self.c
        }
    }

    pub fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            model_dim: self.c,
            latent_dim: self.d,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t", self.t),
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("k", self.k),
            ("n_class", self.n_class),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ArtError::Config(format!("model.{} must be positive", name)));
            }
        }
        if self.k > self.n_class {
            return Err(ArtError::Config(format!(
                "top-K selection needs K <= N_class (K = {}, N_class = {})",
                self.k, self.n_class
            )));
        }
        self.attention_dims()
            .validate()
            .map_err(|e| ArtError::Config(e.to_string()))
    }

    fn sse_stack(&self) -> AttentionStack {
        AttentionStack::new("sse", LayerKind::SelfAttention, self.attention_dims(), self.depth_sse)
    }

    fn rssa_stack(&self) -> AttentionStack {
        AttentionStack::new("rssa", LayerKind::CrossAttention, self.attention_dims(), self.depth_rssa)
    }

    fn positional(&self) -> PositionalEmbedding {
        PositionalEmbedding {
            name: POS.into(),
            enabled: self.positional_embedding,
        }
    }
}

/// Spatio-temporal features `X` of shape `(T, H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    x: Tensor,
}

impl FeatureVolume {
    pub fn new(x: Tensor) -> Result<Self, TensorError> {
        match x.dims() {
            [t, h, w, c] if *t > 0 && *h > 0 && *w > 0 && *c > 0 => {}
            d => {
                return Err(TensorError::shape(
                    "feature_volume",
                    format!("expected (T, H, W, C) with positive extents, got {:?}", d),
                ))
            }
        }
        if !x.is_finite() {
            return Err(TensorError::degenerate("feature_volume", "non-finite features"));
        }
        Ok(FeatureVolume { x })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.x
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.x.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Row-major `(T·H·W, C)` view.
    pub fn as_tokens(&self) -> Tensor {
        let (t, h, w, c) = self.dims();
        self.x.clone().reshape(&[t * h * w, c]).expect("same element count")
    }
}

pub const POS: &str = "pos";
pub const PROMPTS: &str = "prompts";
pub const CLS_LN_G: &str = "cls.ln.g";
pub const CLS_LN_B: &str = "cls.ln.b";
pub const CLS_W: &str = "cls.w";
pub const CLS_B: &str = "cls.b";
pub const HEAD_V_W: &str = "head.v.w";
pub const HEAD_V_B: &str = "head.v.b";
/// Class prototypes; also the weight of the concat prediction head.
pub const PROTOTYPES: &str = "head.con.w";

/// All trainable state plus the semantic bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub bank: SemanticBank,
}

/// Forward-only hooks.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Added to every cross-attention score matrix `(K, H·W)`.
    pub rssa_score_bias: Option<Tensor>,
    /// Inverted-dropout mask `(1, concat_dim)` applied to the concat features.
    pub concat_mask: Option<Tensor>,
}

/// Every intermediate of one video's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub x_cls: Var,
    pub logits_v: Var,
    pub logits_con: Var,
    /// Indices of the selected bank classes, best first.
    pub topk: Vec<usize>,
    pub s_topk: Option<Var>,
    /// `R_t`, one `(K, C)` node per frame.
    pub responses: Vec<Var>,
    /// `Tr_k`, one `(T, C)` node per query.
    pub tracklets: Vec<Var>,
    pub aggregated: Vec<Var>,
    /// Final-layer cross-attention per frame, row-major `(K, H·W)`.
    pub attention: Vec<Vec<f64>>,
}

impl ArtModel {
    /// Fresh model with randomly initialized parameters.
    pub fn init<R: Rng>(cfg: ModelConfig, bank: SemanticBank, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if bank.n_class() != cfg.n_class {
            return Err(ArtError::Config(format!(
                "bank has {} classes, model expects {}",
                bank.n_class(),
                cfg.n_class
            )));
        }
        let c = cfg.c;
        let mut p = ParamStore::new();
        p.insert(CLS_LN_G, Tensor::from_fn(&[c], |_| 1.0));
        p.insert(CLS_LN_B, Tensor::zeros(&[c]));
        p.insert(CLS_W, xavier(rng, c, c));
        p.insert(CLS_B, Tensor::zeros(&[c]));
        p.insert(POS, normal_init(rng, &[cfg.tokens_per_frame(), c], 0.5));
        p.insert(PROMPTS, normal_init(rng, &[cfg.k, c], cfg.prompt_init_std));
        cfg.sse_stack().init(&mut p, rng);
        cfg.rssa_stack().init(&mut p, rng);
        p.insert(HEAD_V_W, normal_init(rng, &[c, cfg.n_class], 0.01));
        p.insert(HEAD_V_B, Tensor::zeros(&[cfg.n_class]));
        p.insert(PROTOTYPES, normal_init(rng, &[cfg.n_class, cfg.concat_dim()], 0.01));
        bank::init_params(&mut p, rng, bank.text_dim(), c, cfg.concat_dim());
        Ok(ArtModel {
            cfg,
            params: p,
            bank,
        })
    }

    /// Runs the whole head on one video.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        video: &FeatureVolume,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (t, h, w, c) = video.dims();
        if (t, h, w, c) != (cfg.t, cfg.h, cfg.w, cfg.c) {
            return Err(ArtError::Config(format!(
                "video dims {:?} do not match model (T, H, W, C) = {:?}",
                (t, h, w, c),
                (cfg.t, cfg.h, cfg.w, cfg.c)
            )));
        }
        let hw = h * w;
        let tokens = g.constant(&video.as_tokens()).stage("input")?;
        let x_cls = class_token(g, b, tokens).stage("class_token")?;

        let mut out = ForwardOutput {
            x_cls,
            logits_v: x_cls,
            logits_con: x_cls,
            topk: Vec::new(),
            s_topk: None,
            responses: Vec::with_capacity(t),
            tracklets: Vec::new(),
            aggregated: Vec::new(),
            attention: Vec::with_capacity(t),
        };

        let mut concat_parts = vec![x_cls];
        if cfg.flags.rssa {
            let proj = b.var(bank::PROJ).stage("select_topk")?;
            let class_sem = bank::class_semantics_for_selection(g, &self.bank.s, proj).stage("select_topk")?;
            let sem_tensor = g.tensor(class_sem);
            out.topk = select_topk_semantics(g.value(x_cls), &sem_tensor, cfg.k).stage("select_topk")?;
            let s_topk = g.gather_rows(class_sem, &out.topk).stage("select_topk")?;
            out.s_topk = Some(s_topk);
            let prompts = b.var(PROMPTS).stage("rssa")?;
            let pos = cfg.positional();
            let sse = cfg.sse_stack();
            let rssa = cfg.rssa_stack();
            for frame in 0..t {
                let x_t = g.narrow(tokens, 0, frame * hw, hw).stage("sse")?;
                let x_t = pos.apply(g, b, x_t).stage("sse")?;
                let (x_hat, s_hat) = if cfg.flags.sse {
                    sse_forward(g, b, &sse, x_t, s_topk).stage("sse")?
                } else {
                    (x_t, s_topk)
                };
                let (r, attn) =
                    rssa_forward(g, b, &rssa, x_hat, prompts, s_hat, opts.rssa_score_bias.as_ref())
                        .stage("rssa")?;
                out.responses.push(r);
                out.attention.push(attn);
            }
            out.tracklets = tracklet::form_tracklets_graph(g, &out.responses).stage("form_tracklets")?;
            for tr in &out.tracklets {
                let agg = if cfg.flags.saliency_aggregation {
                    aggregate_tracklet(g, *tr, s_topk, cfg.aggregation)
                } else {
                    tracklet::mean_pool(g, *tr)
                }
                .stage("aggregate")?;
                out.aggregated.push(agg);
            }
            concat_parts.extend(out.aggregated.iter().copied());
        }
        if let Some(mask) = &opts.concat_mask {
            let joint = if concat_parts.len() == 1 {
                concat_parts[0]
            } else {
                g.concat(&concat_parts, 1).stage("predict")?
            };
            let m = g.constant(mask).stage("predict")?;
            concat_parts = vec![g.mul(joint, m).stage("predict")?];
        }
        let (lv, lc) = predict(g, b, x_cls, &concat_parts).stage("predict")?;
        out.logits_v = lv;
        out.logits_con = lc;
        Ok(out)
    }

    /// Forward with frozen parameters, returning plain values.
    pub fn infer(&self, video: &FeatureVolume) -> Result<Inference> {
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g)?;
        let out = self.forward(&mut g, &b, video, &ForwardOptions::default())?;
        Ok(Inference {
            logits_v: g.value(out.logits_v).to_vec(),
            logits_con: g.value(out.logits_con).to_vec(),
            topk: out.topk,
            responses: out.responses.iter().map(|r| g.tensor(*r)).collect(),
            tracklets: out.tracklets.iter().map(|r| g.tensor(*r)).collect(),
            attention: out.attention,
        })
    }
}

/// Plain-value result of [`ArtModel::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits_v: Vec<f64>,
    pub logits_con: Vec<f64>,
    pub topk: Vec<usize>,
    pub responses: Vec<Tensor>,
    pub tracklets: Vec<Tensor>,
    pub attention: Vec<Vec<f64>>,
}

impl Inference {
    /// Predicted class: argmax of the concat head, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits_con)
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// `Linear(LN(mean over T·H·W of X))` as a `(1, C)` node.
pub fn class_token(g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var, TensorError> {
    let c = g.dims(tokens)[1];
    let m = g.mean(tokens, 0)?;
    let m = g.reshape(m, &[1, c])?;
    let m = g.layer_norm(m, b.var(CLS_LN_G)?, b.var(CLS_LN_B)?, LN_EPS)?;
    let m = g.matmul(m, b.var(CLS_W)?)?;
    g.add_bias(m, b.var(CLS_B)?)
}

/// Indices of the `k` rows of `bank_proj` with the largest cosine to
/// `x_cls`, in descending order; ties go to the lower index.
pub fn select_topk_semantics(x_cls: &[f64], bank_proj: &Tensor, k: usize) -> Result<Vec<usize>, TensorError> {
    let (n, c) = match bank_proj.dims() {
        [n, c] => (*n, *c),
        d => return Err(TensorError::shape("select_topk", format!("{:?}", d))),
    };
    if k > n {
        return Err(TensorError::contract(
            "select_topk",
            format!("K = {} exceeds {} classes", k, n),
        ));
    }
    if x_cls.len() != c {
        return Err(TensorError::shape("select_topk", "x_cls width mismatch"));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let xn = norm(x_cls);
    if xn == 0.0 {
        return Err(TensorError::degenerate("select_topk", "x_cls has zero norm"));
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .map(|j| {
            let row = bank_proj.row(j);
            let rn = norm(row);
            let dot: f64 = row.iter().zip(x_cls).map(|(a, b)| a * b).sum();
            (j, if rn == 0.0 { 0.0 } else { dot / (rn * xn) })
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(j, _)| j).collect())
}

/// Self-attention over `[X_t; S_topk]`, split back into `(X̂_t, Ŝ_t)`.
pub fn sse_forward(
    g: &mut Graph,
    b: &Bound,
    stack: &AttentionStack,
    x_t: Var,
    s_topk: Var,
) -> Result<(Var, Var), TensorError> {
    let n = g.dims(x_t)[0];
    let k = g.dims(s_topk)[0];
    let joint = g.concat(&[x_t, s_topk], 0)?;
    let enhanced = stack.msa(g, b, joint)?;
    let x_hat = g.narrow(enhanced, 0, 0, n)?;
    let s_hat = g.narrow(enhanced, 0, n, k)?;
    Ok((x_hat, s_hat))
}

/// Region queries `Q_t = P + Ŝ_t` cross-attending to `X̂_t`. Returns
/// `R_t` and the final layer's `(K, H·W)` attention.
pub fn rssa_forward(
    g: &mut Graph,
    b: &Bound,
    stack: &AttentionStack,
    x_hat: Var,
    prompts: Var,
    s_hat: Var,
    score_bias: Option<&Tensor>,
) -> Result<(Var, Vec<f64>), TensorError> {
    let q = g.add(prompts, s_hat)?;
    if stack.layers.is_empty() {
        let k = g.dims(q)[0];
        let n = g.dims(x_hat)[0];
        return Ok((q, vec![1.0 / n as f64; k * n]));
    }
    stack.mca(g, b, q, x_hat, score_bias)
}

/// Auxiliary logits from `x_cls` and concat logits from the prototype head
/// applied to `Concat(x_cls, aggregated…)`.
pub fn predict(g: &mut Graph, b: &Bound, x_cls: Var, concat_parts: &[Var]) -> Result<(Var, Var), TensorError> {
    let lv = g.matmul(x_cls, b.var(HEAD_V_W)?)?;
    let lv = g.add_bias(lv, b.var(HEAD_V_B)?)?;
    let joint = if concat_parts.len() == 1 {
        concat_parts[0]
    } else {
        g.concat(concat_parts, 1)?
    };
    let wt = g.transpose(b.var(PROTOTYPES)?)?;
    let lc = g.matmul(joint, wt)?;
    Ok((lv, lc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proj_rows(cos: &[f64]) -> Tensor {
        // unit rows with a prescribed cosine against (1, 0)
        Tensor::from_rows(
            &cos.iter()
                .map(|c| vec![*c, (1.0 - c * c).sqrt()])
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn topk_ordering() {
        let sem = proj_rows(&[0.9, 0.1, 0.5]);
        assert_eq!(select_topk_semantics(&[1.0, 0.0], &sem, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk_semantics(&[1.0, 0.0], &sem, 3).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let sem = proj_rows(&[0.1, 0.5, 0.5]);
        assert_eq!(select_topk_semantics(&[1.0, 0.0], &sem, 1).unwrap(), vec![1]);
        assert_eq!(select_topk_semantics(&[1.0, 0.0], &sem, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn topk_larger_than_classes_is_error() {
        let sem = proj_rows(&[0.1, 0.5]);
        assert!(matches!(
            select_topk_semantics(&[1.0, 0.0], &sem, 3),
            Err(TensorError::Contract { .. })
        ));
    }

    #[test]
    fn feature_volume_rejects_bad_input() {
        assert!(FeatureVolume::new(Tensor::zeros(&[2, 2, 2])).is_err());
        assert!(FeatureVolume::new(Tensor::zeros(&[0, 2, 2, 2])).is_err());
        let mut t = Tensor::zeros(&[1, 1, 1, 2]);
        t.data_mut()[0] = f64::NAN;
        assert!(matches!(FeatureVolume::new(t), Err(TensorError::Degenerate { .. })));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            k: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            d: 10,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
