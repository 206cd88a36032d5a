//! Multi-headed self-attention (MSA) and cross-attention (MCA) layers.

use rand::Rng;

use crate::error::TensorError;
use crate::params::{normal_init, xavier, Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// `softmax(Q Kᵀ / √d) V` where `d` is the trailing extent of `q`.
///
/// `score_bias`, when given, is added to the `(q, k)` score matrix before the
/// softmax; tests use it to force saturated rows.
///
/// Returns the output and the attention weight matrix.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    score_bias: Option<&Tensor>,
) -> Result<(Var, Var), TensorError> {
    let d = *g.dims(q).last().unwrap_or(&0);
    if d == 0 {
        return Err(TensorError::contract("scaled_dot_attention", "d == 0"));
    }
    if g.dims(k).last() != Some(&d) || g.dims(k).first() != g.dims(v).first() {
        return Err(TensorError::shape(
            "scaled_dot_attention",
            format!("q {:?}, k {:?}, v {:?}", g.dims(q), g.dims(k), g.dims(v)),
        ));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    if let Some(bias) = score_bias {
        let b = g.constant(bias)?;
        scores = g.add(scores, b)?;
    }
    let weights = g.softmax(scores, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Splits projected `q`, `k`, `v` (width `d`) into `heads` slices, attends
/// per head and concatenates. Returns the output and the head-averaged
/// weights, row-major `(q_rows, k_rows)`.
fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    score_bias: Option<&Tensor>,
) -> Result<(Var, Vec<f64>), TensorError> {
    let d = g.dims(q)[1];
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut mean_w: Vec<f64> = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.narrow(q, 1, h * dh, dh)?,
                g.narrow(k, 1, h * dh, dh)?,
                g.narrow(v, 1, h * dh, dh)?,
            )
        };
        let (o, w) = scaled_dot_attention(g, qh, kh, vh, score_bias)?;
        let wv = g.value(w);
        if mean_w.is_empty() {
            mean_w = wv.iter().map(|x| x / heads as f64).collect();
        } else {
            mean_w.iter_mut().zip(wv).for_each(|(m, x)| *m += x / heads as f64);
        }
        outs.push(o);
    }
    let out = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    Ok((out, mean_w))
}

/// Shape hyperparameters shared by every attention layer of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    /// Token width `C`.
    pub model_dim: usize,
    /// Latent width `d` of the Q/K/V projections.
    pub latent_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl AttentionDims {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.heads == 0 || self.latent_dim == 0 || !self.latent_dim.is_multiple_of(self.heads) {
            return Err(TensorError::contract(
                "attention",
                format!("latent dim {} not divisible by {} heads", self.latent_dim, self.heads),
            ));
        }
        if self.model_dim == 0 {
            return Err(TensorError::contract("attention", "model dim must be positive"));
        }
        Ok(())
    }
}

/// Which flavour of layer a parameter prefix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Pre-norm encoder layer: `x + Attn(LN x)`, then `+ FFN(LN ·)`.
    SelfAttention,
    /// Query-side residual cross-attention: `Q + Attn(Q, X) W_O`.
    CrossAttention,
}

/// One transformer layer whose parameters live under `prefix` in a
/// [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub prefix: String,
    pub kind: LayerKind,
    pub dims: AttentionDims,
}

impl AttentionLayer {
    pub fn new(prefix: impl Into<String>, kind: LayerKind, dims: AttentionDims) -> Self {
        AttentionLayer {
            prefix: prefix.into(),
            kind,
            dims,
        }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{}", self.prefix, leaf)
    }

    fn p(&self, b: &Bound, leaf: &str) -> Result<Var, TensorError> {
        b.var(&self.name(leaf))
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let AttentionDims {
            model_dim: c,
            latent_dim: d,
            ffn_mult,
            ..
        } = self.dims;
        store.insert(self.name("wq"), xavier(rng, c, d));
        store.insert(self.name("wk"), xavier(rng, c, d));
        store.insert(self.name("wv"), xavier(rng, c, d));
        store.insert(self.name("wo"), xavier(rng, d, c));
        if self.kind == LayerKind::SelfAttention {
            let h = ffn_mult * c;
            for ln in ["ln1", "ln2"] {
                store.insert(self.name(&format!("{}.g", ln)), Tensor::from_fn(&[c], |_| 1.0));
                store.insert(self.name(&format!("{}.b", ln)), Tensor::zeros(&[c]));
            }
            store.insert(self.name("ffn.w1"), xavier(rng, c, h));
            store.insert(self.name("ffn.b1"), Tensor::zeros(&[h]));
            store.insert(self.name("ffn.w2"), normal_init(rng, &[h, c], (1.0 / h as f64).sqrt() * 0.5));
            store.insert(self.name("ffn.b2"), Tensor::zeros(&[c]));
        }
    }

    /// Self-attention encoder layer over `(n, C)` tokens.
    pub fn msa(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var, TensorError> {
        if self.kind != LayerKind::SelfAttention {
            return Err(TensorError::contract("msa_layer", "layer is not self-attention"));
        }
        if g.dims(x).first() == Some(&0) {
            return Err(TensorError::contract("msa_layer", "no tokens"));
        }
        let h = g.layer_norm(x, self.p(b, "ln1.g")?, self.p(b, "ln1.b")?, LN_EPS)?;
        let q = g.matmul(h, self.p(b, "wq")?)?;
        let k = g.matmul(h, self.p(b, "wk")?)?;
        let v = g.matmul(h, self.p(b, "wv")?)?;
        let (a, _) = multi_head(g, q, k, v, self.dims.heads, None)?;
        let a = g.matmul(a, self.p(b, "wo")?)?;
        let x = g.add(x, a)?;
        let h = g.layer_norm(x, self.p(b, "ln2.g")?, self.p(b, "ln2.b")?, LN_EPS)?;
        let h = g.matmul(h, self.p(b, "ffn.w1")?)?;
        let h = g.add_bias(h, self.p(b, "ffn.b1")?)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, self.p(b, "ffn.w2")?)?;
        let h = g.add_bias(h, self.p(b, "ffn.b2")?)?;
        g.add(x, h)
    }

    /// Cross-attention of `(K, C)` queries over `(n, C)` context tokens,
    /// with the query residual. Returns the responses and the head-averaged
    /// `(K, n)` attention weights.
    pub fn mca(
        &self,
        g: &mut Graph,
        b: &Bound,
        queries: Var,
        context: Var,
        score_bias: Option<&Tensor>,
    ) -> Result<(Var, Vec<f64>), TensorError> {
        if self.kind != LayerKind::CrossAttention {
            return Err(TensorError::contract("mca_layer", "layer is not cross-attention"));
        }
        if g.dims(context).first().copied().unwrap_or(0) == 0 {
            return Err(TensorError::contract("mca_layer", "empty context"));
        }
        if g.dims(queries).first().copied().unwrap_or(0) == 0 {
            return Err(TensorError::contract("mca_layer", "no queries"));
        }
        let q = g.matmul(queries, self.p(b, "wq")?)?;
        let k = g.matmul(context, self.p(b, "wk")?)?;
        let v = g.matmul(context, self.p(b, "wv")?)?;
        let (a, w) = multi_head(g, q, k, v, self.dims.heads, score_bias)?;
        let a = g.matmul(a, self.p(b, "wo")?)?;
        Ok((g.add(a, queries)?, w))
    }
}

/// A stack of identical-kind layers named `{prefix}.{i}`.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layers: Vec<AttentionLayer>,
}

impl AttentionStack {
    pub fn new(prefix: &str, kind: LayerKind, dims: AttentionDims, depth: usize) -> Self {
        AttentionStack {
            layers: (0..depth)
                .map(|i| AttentionLayer::new(format!("{}.{}", prefix, i), kind, dims))
                .collect(),
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn msa(&self, g: &mut Graph, b: &Bound, mut x: Var) -> Result<Var, TensorError> {
        for l in &self.layers {
            x = l.msa(g, b, x)?;
        }
        Ok(x)
    }

    /// Runs every cross-attention layer; the attention map returned is the
    /// final layer's.
    pub fn mca(
        &self,
        g: &mut Graph,
        b: &Bound,
        mut q: Var,
        context: Var,
        score_bias: Option<&Tensor>,
    ) -> Result<(Var, Vec<f64>), TensorError> {
        let mut attn = Vec::new();
        for l in &self.layers {
            let (r, w) = l.mca(g, b, q, context, score_bias)?;
            q = r;
            attn = w;
        }
        Ok((q, attn))
    }
}

/// Learned `(H·W, C)` table added to frame tokens. Disabled tables
/// contribute nothing.
#[derive(Debug, Clone)]
pub struct PositionalEmbedding {
    pub name: String,
    pub enabled: bool,
}

impl PositionalEmbedding {
    pub fn apply(&self, g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var, TensorError> {
        if !self.enabled {
            return Ok(tokens);
        }
        let table = b.var(&self.name)?;
        g.add(tokens, table)
    }
}
