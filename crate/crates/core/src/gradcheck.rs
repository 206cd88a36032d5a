//! Central finite-difference checks of every differentiable op, the
//! attention layers, the losses and one end-to-end training objective.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDims, AttentionLayer, LayerKind};
use crate::bank;
use crate::config::RunConfig;
use crate::error::{ArtError, Result, TensorError};
use crate::head::tracklet::{aggregate_tracklet, AggregationMode};
use crate::head::{class_token, ForwardOptions, ModelConfig};
use crate::mtc::{self, MtcConfig, TemporalMode};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::synth::{self, SynthConfig};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{self, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients near zero are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub precision: Precision,
    /// Test hook: perturbs the analytic gradient of the named check.
    pub corrupt: Option<String>,
}

/// Worst relative error of one check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub op: String,
    pub n_checked: usize,
    pub max_rel_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError>>;

/// A function of some input tensors, checked with respect to all of them.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

impl Case {
    pub fn new(
        name: &str,
        inputs: Vec<Tensor>,
        f: impl Fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            inputs,
            f: Box::new(f),
        }
    }
}

/// Fixed projection turning any output into a scalar, so every output
/// element contributes to the checked gradient.
fn probe(name: &str, n: usize) -> Vec<f64> {
    let mut rng = substream(0, name, 1);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn scalarize(g: &mut Graph, name: &str, y: Var) -> std::result::Result<Var, TensorError> {
    let n = g.value(y).len();
    if n == 1 {
        return g.reshape(y, &[]);
    }
    let dims = g.dims(y).to_vec();
    let w = g.constant(&Tensor::new(dims, probe(name, n))?)?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn eval_case(case: &Case, inputs: &[Tensor]) -> std::result::Result<f64, TensorError> {
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t)).collect::<std::result::Result<Vec<_>, _>>()?;
    let y = (case.f)(&mut g, &vars)?;
    let s = scalarize(&mut g, &case.name, y)?;
    Ok(g.scalar(s))
}

fn corrupt_grads(grads: &mut [Vec<f64>]) {
    if let Some(x) = grads.iter_mut().find_map(|g| g.first_mut()) {
        *x += 0.1 + x.abs();
    }
}

/// Checks every input element of `case`.
pub fn check_case(case: &Case, corrupt: bool) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars = case
        .inputs
        .iter()
        .map(|t| g.leaf(t))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let y = (case.f)(&mut g, &vars)?;
    let s = scalarize(&mut g, &case.name, y)?;
    g.backward(s)?;
    let mut analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    if corrupt {
        corrupt_grads(&mut analytic);
    }
    let mut worst = 0.0f64;
    let mut n = 0;
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval_case(case, &inputs)?;
            inputs[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval_case(case, &inputs)?;
            inputs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[i][j], numeric));
            n += 1;
        }
    }
    Ok(GradReport {
        op: case.name.clone(),
        n_checked: n,
        max_rel_error: worst,
    })
}

fn randn(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    Tensor::from_fn(dims, |_| rng.sample(StandardNormal))
}

/// Normal draws kept at least `margin` away from zero, for kinked ops.
fn randn_away(rng: &mut impl Rng, dims: &[usize], margin: f64) -> Tensor {
    Tensor::from_fn(dims, |_| loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() > margin {
            break x;
        }
    })
}

fn distinct(rng: &mut impl Rng, dims: &[usize]) -> Tensor {
    // spaced values so that max never sees a near-tie
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.3).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(dims.to_vec(), v.iter().map(|x| x + 0.01 * rng.gen::<f64>()).collect()).expect("sized")
}

/// The elementary ops of the autodiff engine.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = substream(seed, "gradcheck", 0);
    let r = &mut rng;
    vec![
        Case::new("matmul", vec![randn(r, &[3, 4]), randn(r, &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        Case::new("add", vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |g, v| g.add(v[0], v[1])),
        Case::new("sub", vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |g, v| g.sub(v[0], v[1])),
        Case::new("mul", vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |g, v| g.mul(v[0], v[1])),
        Case::new("scale", vec![randn(r, &[5])], |g, v| g.scale(v[0], -1.7)),
        Case::new("add_scalar", vec![randn(r, &[5])], |g, v| g.add_scalar(v[0], 0.3)),
        Case::new("add_bias", vec![randn(r, &[3, 4]), randn(r, &[4])], |g, v| g.add_bias(v[0], v[1])),
        Case::new("gelu", vec![randn(r, &[6])], |g, v| g.gelu(v[0])),
        Case::new("relu", vec![randn_away(r, &[6], 1e-2)], |g, v| g.relu(v[0])),
        Case::new("concat", vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |g, v| g.concat(&[v[0], v[1]], 1)),
        Case::new("narrow", vec![randn(r, &[4, 3])], |g, v| g.narrow(v[0], 0, 1, 2)),
        Case::new("index_axis0", vec![randn(r, &[3, 2, 2])], |g, v| g.index_axis0(v[0], 1)),
        Case::new("mean", vec![randn(r, &[3, 4])], |g, v| g.mean(v[0], 0)),
        Case::new("sum_all", vec![randn(r, &[3, 2])], |g, v| g.sum_all(v[0])),
        Case::new("mean_all", vec![randn(r, &[3, 2])], |g, v| g.mean_all(v[0])),
        Case::new("add_n", vec![randn(r, &[4]), randn(r, &[4]), randn(r, &[4])], |g, v| {
            g.add_n(&[v[0], v[1], v[2]])
        }),
        Case::new("transpose", vec![randn(r, &[2, 3])], |g, v| g.transpose(v[0])),
        Case::new("reshape", vec![randn(r, &[2, 3])], |g, v| g.reshape(v[0], &[3, 2])),
        Case::new(
            "layer_norm",
            vec![randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        Case::new("softmax", vec![randn(r, &[3, 4])], |g, v| g.softmax(v[0], 1)),
        Case::new("cosine", vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |g, v| g.cosine(v[0], v[1])),
        Case::new("normalize_rows", vec![randn(r, &[3, 4])], |g, v| g.normalize_rows(v[0])),
        Case::new("cross_entropy", vec![randn(r, &[5])], |g, v| g.cross_entropy(v[0], 2)),
        Case::new("gather_rows", vec![randn(r, &[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        Case::new("max", vec![distinct(r, &[3, 4])], |g, v| g.max(v[0], 0)),
        Case::new("identity", vec![randn(r, &[3])], |g, v| g.identity(v[0])),
    ]
}

fn layer_store(seed: u64, layer: &AttentionLayer) -> ParamStore {
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut substream(seed, "gradcheck", 1));
    store
}

/// Runs `layer` with its parameters supplied as case inputs, in store order.
fn layer_case(name: &str, seed: u64, kind: LayerKind, extra: Vec<Tensor>) -> Case {
    let dims = AttentionDims {
        model_dim: 4,
        latent_dim: 4,
        heads: 2,
        ffn_mult: 2,
    };
    let layer = AttentionLayer::new("l", kind, dims);
    let store = layer_store(seed, &layer);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    Case::new(name, inputs, move |g, v| {
        let b = bound_from(&names, &v[n_extra..]);
        match kind {
            LayerKind::SelfAttention => layer.msa(g, &b, v[0]),
            LayerKind::CrossAttention => layer.mca(g, &b, v[0], v[1], None).map(|(r, _)| r),
        }
    })
}

fn bound_from(names: &[String], vars: &[Var]) -> crate::params::Bound {
    crate::params::Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Attention layers, the class token and tracklet aggregation.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut rng = substream(seed, "gradcheck", 2);
    let r = &mut rng;
    let mut cases = vec![
        layer_case("msa_layer", seed, LayerKind::SelfAttention, vec![randn(r, &[5, 4])]),
        layer_case(
            "mca_layer",
            seed,
            LayerKind::CrossAttention,
            vec![randn(r, &[2, 4]), randn(r, &[5, 4])],
        ),
    ];
    let names: Vec<String> = [crate::head::CLS_B, crate::head::CLS_LN_B, crate::head::CLS_LN_G, crate::head::CLS_W]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cls_inputs = vec![
        randn(r, &[6, 3]),
        randn(r, &[3]),
        randn(r, &[3]),
        randn(r, &[3]),
        randn(r, &[3, 3]),
    ];
    cases.push(Case::new("class_token", cls_inputs, move |g, v| {
        class_token(g, &bound_from(&names, &v[1..]), v[0])
    }));
    for (name, mode) in [
        ("aggregate_literal", AggregationMode::Literal),
        ("aggregate_normalized", AggregationMode::Normalized),
    ] {
        cases.push(Case::new(name, vec![randn(r, &[3, 4]), randn(r, &[2, 4])], move |g, v| {
            aggregate_tracklet(g, v[0], v[1], mode)
        }));
    }
    cases
}

/// The MTC terms and the two semantic-consistency losses.
pub fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = substream(seed, "gradcheck", 3);
    let r = &mut rng;
    let frames = |r: &mut rand_chacha::ChaCha8Rng| (0..3).map(|_| randn(r, &[2, 4])).collect::<Vec<_>>();
    let mut cases = vec![
        Case::new("spatial_loss", frames(r), mtc::spatial_loss),
        Case::new("tracklet_loss", frames(r), mtc::tracklet_loss),
    ];
    for (name, mode) in [("temporal_hinge", TemporalMode::Hinge), ("temporal_literal", TemporalMode::Literal)] {
        let cfg = MtcConfig {
            lambda: 0.6,
            temporal_mode: mode,
            ..MtcConfig::default()
        };
        cases.push(Case::new(name, frames(r), move |g, v| mtc::temporal_loss(g, v, &cfg).map(|(l, _)| l)));
    }
    cases.push(Case::new(
        "video_consistency",
        vec![randn(r, &[1, 4]), randn(r, &[2, 3, 5]), randn(r, &[5, 4])],
        |g, v| bank::video_consistency_loss(g, v[0], v[1], v[2], 1),
    ));
    let names: Vec<String> = [bank::MLP_B1, bank::MLP_B2, bank::MLP_W1, bank::MLP_W2]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let proto_inputs = vec![
        randn(r, &[3, 6]),
        randn(r, &[2, 3, 5]),
        randn(r, &[5]),
        randn(r, &[5]),
        randn(r, &[6, 5]),
        randn(r, &[5, 5]),
    ];
    cases.push(Case::new("prototype_consistency", proto_inputs, move |g, v| {
        bank::prototype_consistency_loss(g, &bound_from(&names, &v[2..]), v[0], v[1], false)
    }));
    cases
}

/// End-to-end training objective of a `(T, H, W, C, K, N_class) =
/// (2, 2, 2, 8, 2, 3)` model with respect to every parameter and the bank
/// agent.
pub fn end_to_end_case(seed: u64) -> Result<Case> {
    let synth_cfg = SynthConfig {
        t: 2,
        h: 2,
        w: 2,
        c: 8,
        n_parts: 2,
        n_classes: 3,
        speed: 0.0,
        seed,
        ..SynthConfig::default()
    };
    let mut cfg = RunConfig {
        seed,
        synth: synth_cfg,
        model: ModelConfig {
            t: 2,
            h: 2,
            w: 2,
            c: 8,
            k: 2,
            d: 8,
            heads: 2,
            depth_sse: 1,
            depth_rssa: 1,
            n_class: 3,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.bank.text_dim = 6;
    cfg.bank.n_prom = 2;
    let cfg = cfg.resolved();
    let model = cfg.build_model()?;
    let sample = synth::generate_range(&cfg.synth, 0, 1)?.remove(0);
    let train: TrainConfig = cfg.train;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    inputs.push(model.bank.sa.clone());
    Ok(Case::new("end_to_end", inputs, move |g, v| {
        let n = names.len();
        let b = bound_from(&names, &v[..n]);
        let sa = v[n];
        let o = trainer::sample_objective(g, &b, sa, &model, &sample, &train, train.gamma1, &ForwardOptions::default())
            .map_err(unwrap_tensor)?;
        let p = trainer::prototype_objective(g, &b, sa, &train).map_err(unwrap_tensor)?;
        let p = g.scale(p, train.gamma2)?;
        g.add(o.objective, p)
    }))
}

fn unwrap_tensor(e: ArtError) -> TensorError {
    match e {
        ArtError::Tensor(t) | ArtError::Stage { source: t, .. } => t,
        other => TensorError::contract("end_to_end", other.to_string()),
    }
}

/// Every case of the suite.
pub fn all_cases(seed: u64) -> Result<Vec<Case>> {
    let mut cases = op_cases(seed);
    cases.extend(layer_cases(seed));
    cases.extend(loss_cases(seed));
    cases.push(end_to_end_case(seed)?);
    Ok(cases)
}

/// Runs the whole suite. Refuses anything but f64.
pub fn run(seed: u64, cfg: &GradcheckConfig) -> Result<Vec<GradReport>> {
    if cfg.precision != Precision::F64 {
        return Err(ArtError::Config(
            "gradient checks need f64; finite differences at h = 1e-5 are meaningless in f32".into(),
        ));
    }
    let cases = all_cases(seed)?;
    if let Some(name) = &cfg.corrupt {
        if !cases.iter().any(|c| &c.name == name) {
            return Err(ArtError::Config(format!("no gradient check named {}", name)));
        }
    }
    cases
        .iter()
        .map(|c| check_case(c, cfg.corrupt.as_deref() == Some(c.name.as_str())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        assert!((rel_error(1e-6, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn ops_pass() {
        for case in op_cases(1) {
            let r = check_case(&case, false).unwrap();
            assert!(r.passed(), "{:?}", r);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let case = &op_cases(1)[0];
        assert!(!check_case(case, true).unwrap().passed());
    }

    #[test]
    fn f32_is_refused() {
        let cfg = GradcheckConfig {
            precision: Precision::F32,
            corrupt: None,
        };
        assert!(matches!(run(0, &cfg), Err(ArtError::Config(_))));
    }
}
