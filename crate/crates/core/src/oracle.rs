//! Loop-based reference implementations of the losses, the saliency
//! aggregation and single-head cross-attention, plus a harness comparing
//! them with the graph versions on random instances.
//!
//! Everything here works on nested `Vec`s and plain loops so that it shares
//! no code with the tensor engine.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{AttentionDims, AttentionLayer, LayerKind};
use crate::bank;
use crate::error::Result;
use crate::head::tracklet::{aggregate_tracklet, AggregationMode};
use crate::mtc::{self, MtcConfig, TemporalMode};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::tensor::{Graph, Tensor};

/// Row-major matrix.
pub type Mat = Vec<Vec<f64>>;

pub const ORACLE_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn cross_entropy(z: &[f64], target: usize) -> f64 {
    -softmax(z)[target].ln()
}

fn vec_mat(v: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    let mut out = vec![0.0; cols];
    for (i, row) in m.iter().enumerate() {
        for j in 0..cols {
            out[j] += v[i] * row[j];
        }
    }
    out
}

/// Same-frame repulsion. `frames[t][k]` is `r_{t,k}`.
pub fn spatial(frames: &[Mat]) -> f64 {
    let k = frames[0].len();
    if k < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for f in frames {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += cosine(&f[i], &f[j]);
                }
            }
        }
    }
    s / (frames.len() * k * (k - 1)) as f64
}

/// Adjacent-frame attraction in either mode.
pub fn temporal(frames: &[Mat], lambda: f64, mode: TemporalMode) -> f64 {
    let t = frames.len();
    if t < 2 {
        return 0.0;
    }
    let k = frames[0].len();
    let mut s = 0.0;
    #[allow(clippy::needless_range_loop)]
    for q in 0..k {
        for i in 0..t - 1 {
            s += cosine(&frames[i][q], &frames[i + 1][q]);
        }
    }
    let m = s / (k * (t - 1)) as f64;
    match mode {
        TemporalMode::Literal => m - lambda,
        TemporalMode::Hinge => (lambda - m).max(0.0),
    }
}

/// Repulsion between flattened tracklets. `tracklets[k][t]` is `r_{t,k}`.
pub fn tracklet(tracklets: &[Mat]) -> f64 {
    let k = tracklets.len();
    if k < 2 {
        return 0.0;
    }
    let flat: Vec<Vec<f64>> = tracklets.iter().map(|tr| tr.concat()).collect();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                s += cosine(&flat[i], &flat[j]);
            }
        }
    }
    s / (k * (k - 1)) as f64
}

/// Saliency-weighted summary of one `(T, C)` tracklet against `(N, C)`
/// semantics.
pub fn aggregate(tracklet: &Mat, semantics: &Mat, mode: AggregationMode) -> Vec<f64> {
    let t = tracklet.len();
    let c = tracklet[0].len();
    let mut w = vec![0.0; t];
    for s in semantics {
        let scores: Vec<f64> = tracklet.iter().map(|r| dot(s, r)).collect();
        for (acc, p) in w.iter_mut().zip(softmax(&scores)) {
            *acc += p / semantics.len() as f64;
        }
    }
    let mut out = vec![0.0; c];
    for (r, wt) in tracklet.iter().zip(&w) {
        for j in 0..c {
            out[j] += r[j] * wt;
        }
    }
    let norm = match mode {
        AggregationMode::Literal => t as f64,
        AggregationMode::Normalized => w.iter().sum(),
    };
    out.iter().map(|v| v / norm).collect()
}

/// Winner-take-all video consistency. `sa[i][j]` is prompt `i` of class `j`;
/// `proj` maps text width to visual width.
pub fn video_consistency(x_cls: &[f64], sa: &[Mat], proj: &Mat, label: usize) -> f64 {
    let n_class = sa[0].len();
    let mut scores = vec![f64::NEG_INFINITY; n_class];
    for prompt in sa {
        for (j, s) in prompt.iter().enumerate() {
            scores[j] = scores[j].max(cosine(x_cls, &vec_mat(s, proj)));
        }
    }
    cross_entropy(&scores, label)
}

/// Two-layer GELU MLP.
pub struct Mlp {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

impl Mlp {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = vec_mat(x, &self.w1)
            .iter()
            .zip(&self.b1)
            .map(|(a, b)| gelu(a + b))
            .collect();
        vec_mat(&h, &self.w2).iter().zip(&self.b2).map(|(a, b)| a + b).collect()
    }
}

/// Prototype consistency of the `(N_class, D)` prototypes `w`.
pub fn prototype_consistency(w: &Mat, mlp: &Mlp, sa: &[Mat], sum_rows: bool) -> f64 {
    let n_class = w.len();
    let emb: Vec<Vec<f64>> = w.iter().map(|row| mlp.apply(row)).collect();
    let mut total = 0.0;
    for (j, e) in emb.iter().enumerate() {
        let row: Vec<f64> = (0..n_class)
            .map(|c| sa.iter().map(|prompt| cosine(e, &prompt[c])).sum::<f64>() / sa.len() as f64)
            .collect();
        total += cross_entropy(&row, j);
    }
    if sum_rows {
        total
    } else {
        total / n_class as f64
    }
}

/// Single-head cross-attention with the query residual:
/// `softmax(q Wq (x Wk)ᵀ / √d) x Wv Wo + q`.
pub fn cross_attention(q: &Mat, x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat) -> Mat {
    let d = wq[0].len();
    let keys: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, wk)).collect();
    let values: Vec<Vec<f64>> = x.iter().map(|r| vec_mat(r, wv)).collect();
    q.iter()
        .map(|qr| {
            let qp = vec_mat(qr, wq);
            let scores: Vec<f64> = keys.iter().map(|k| dot(&qp, k) / (d as f64).sqrt()).collect();
            let p = softmax(&scores);
            let mut mixed = vec![0.0; d];
            for (pi, v) in p.iter().zip(&values) {
                for j in 0..d {
                    mixed[j] += pi * v[j];
                }
            }
            vec_mat(&mixed, wo).iter().zip(qr).map(|(a, b)| a + b).collect()
        })
        .collect()
}

/// Worst deviation of one graph computation from its oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_deviation: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_deviation <= ORACLE_TOL
    }
}

fn normal_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).expect("rectangular")
}

fn tensor3(m: &[Mat]) -> Tensor {
    let dims = vec![m.len(), m[0].len(), m[0][0].len()];
    Tensor::new(dims, m.iter().flat_map(|x| x.concat()).collect()).expect("rectangular")
}

fn to_mat(t: &Tensor) -> Mat {
    let cols = *t.dims().last().unwrap_or(&1);
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

/// Compares every loss, the aggregation in both modes and single-head
/// cross-attention against the loop oracles on `instances` random cases with
/// `T ≤ 4, K ≤ 3, C ≤ 8, N_class ≤ 4`.
pub fn run_loss_oracles(seed: u64, instances: usize) -> Result<Vec<OracleCheck>> {
    const NAMES: [&str; 9] = [
        "spatial",
        "temporal_hinge",
        "temporal_literal",
        "tracklet",
        "aggregate_literal",
        "aggregate_normalized",
        "video_consistency",
        "prototype_consistency",
        "cross_attention",
    ];
    let mut worst = [0.0f64; NAMES.len()];
    for i in 0..instances {
        let mut rng = substream(seed, "oracle", i as u64);
        let t = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3);
        let c = rng.gen_range(1..=8);
        let n_class = rng.gen_range(1..=4);
        let n_prom = rng.gen_range(1..=3);
        let c_t = rng.gen_range(1..=8);
        let lambda = rng.gen_range(-1.0..=1.0);
        let frames: Vec<Mat> = (0..t).map(|_| normal_mat(&mut rng, k, c)).collect();
        let tracklets: Vec<Mat> = (0..k)
            .map(|q| frames.iter().map(|f| f[q].clone()).collect())
            .collect();
        let mut dev = [0.0f64; NAMES.len()];

        let mut g = Graph::new();
        let rv = frames
            .iter()
            .map(|f| g.constant(&tensor(f)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let tv = tracklets
            .iter()
            .map(|tr| g.constant(&tensor(tr)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let s = mtc::spatial_loss(&mut g, &rv)?;
        dev[0] = (g.scalar(s) - spatial(&frames)).abs();
        for (slot, mode) in [(1, TemporalMode::Hinge), (2, TemporalMode::Literal)] {
            let cfg = MtcConfig {
                lambda,
                temporal_mode: mode,
                ..MtcConfig::default()
            };
            let (l, _) = mtc::temporal_loss(&mut g, &rv, &cfg)?;
            dev[slot] = (g.scalar(l) - temporal(&frames, lambda, mode)).abs();
        }
        let l = mtc::tracklet_loss(&mut g, &tv)?;
        dev[3] = (g.scalar(l) - tracklet(&tracklets)).abs();

        let sem = normal_mat(&mut rng, k, c);
        let sv = g.constant(&tensor(&sem))?;
        for (slot, mode) in [(4, AggregationMode::Literal), (5, AggregationMode::Normalized)] {
            for (q, tr) in tracklets.iter().enumerate() {
                let a = aggregate_tracklet(&mut g, tv[q], sv, mode)?;
                let want = aggregate(tr, &sem, mode);
                for (x, y) in g.value(a).iter().zip(&want) {
                    dev[slot] = dev[slot].max((x - y).abs());
                }
            }
        }

        let sa: Vec<Mat> = (0..n_prom).map(|_| normal_mat(&mut rng, n_class, c_t)).collect();
        let proj = normal_mat(&mut rng, c_t, c);
        let x_cls = normal_mat(&mut rng, 1, c);
        let label = rng.gen_range(0..n_class);
        let sav = g.constant(&tensor3(&sa))?;
        let pv = g.constant(&tensor(&proj))?;
        let xv = g.constant(&tensor(&x_cls))?;
        let l = bank::video_consistency_loss(&mut g, xv, sav, pv, label)?;
        dev[6] = (g.scalar(l) - video_consistency(&x_cls[0], &sa, &proj, label)).abs();

        let d = rng.gen_range(1..=12);
        let mlp = Mlp {
            w1: normal_mat(&mut rng, d, c_t),
            b1: normal_mat(&mut rng, 1, c_t).remove(0),
            w2: normal_mat(&mut rng, c_t, c_t),
            b2: normal_mat(&mut rng, 1, c_t).remove(0),
        };
        let w = normal_mat(&mut rng, n_class, d);
        let sum_rows = rng.gen_bool(0.5);
        let mut store = ParamStore::new();
        store.insert(bank::MLP_W1, tensor(&mlp.w1));
        store.insert(bank::MLP_B1, Tensor::vector(mlp.b1.clone()));
        store.insert(bank::MLP_W2, tensor(&mlp.w2));
        store.insert(bank::MLP_B2, Tensor::vector(mlp.b2.clone()));
        let b = store.bind_frozen(&mut g)?;
        let wv = g.constant(&tensor(&w))?;
        let l = bank::prototype_consistency_loss(&mut g, &b, wv, sav, sum_rows)?;
        dev[7] = (g.scalar(l) - prototype_consistency(&w, &mlp, &sa, sum_rows)).abs();

        let d_lat = rng.gen_range(1..=8);
        let layer = AttentionLayer::new(
            "x",
            LayerKind::CrossAttention,
            AttentionDims {
                model_dim: c,
                latent_dim: d_lat,
                heads: 1,
                ffn_mult: 1,
            },
        );
        let mut store = ParamStore::new();
        layer.init(&mut store, &mut rng);
        let n_tok = rng.gen_range(1..=6);
        let q = normal_mat(&mut rng, k, c);
        let x = normal_mat(&mut rng, n_tok, c);
        let b = store.bind_frozen(&mut g)?;
        let qv = g.constant(&tensor(&q))?;
        let xv = g.constant(&tensor(&x))?;
        let (r, _) = layer.mca(&mut g, &b, qv, xv, None)?;
        let p = |n: &str| to_mat(store.get(&format!("x.{}", n)).expect("initialized"));
        let want = cross_attention(&q, &x, &p("wq"), &p("wk"), &p("wv"), &p("wo"));
        for (a, b) in g.value(r).iter().zip(want.concat()) {
            dev[8] = dev[8].max((a - b).abs());
        }

        for (w, d) in worst.iter_mut().zip(dev) {
            *w = w.max(d);
        }
    }
    Ok(NAMES
        .iter()
        .zip(worst)
        .map(|(name, max_deviation)| OracleCheck {
            name,
            instances,
            max_deviation,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((spatial(&[vec![vec![1.0, 0.0], vec![h, h]]]) - 0.70711).abs() < 1e-5);
        let same = [vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]];
        assert!((temporal(&same, 0.6, TemporalMode::Literal) - 0.4).abs() < 1e-15);
        assert_eq!(temporal(&same, 0.6, TemporalMode::Hinge), 0.0);
        let tr = vec![vec![2.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(aggregate(&tr, &vec![vec![1.0, 0.0]], AggregationMode::Literal), vec![1.0, 0.0]);
    }

    #[test]
    fn graph_matches_oracles() {
        for check in run_loss_oracles(11, 200).unwrap() {
            assert!(check.passed(), "{:?}", check);
        }
    }
}
