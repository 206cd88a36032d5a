//! Text-constrained semantic bank.
//!
//! Three copies of an `(N_prom, N_class, C_t)` tensor are kept: the frozen
//! initial bank `S0`, the served bank `S` (never differentiated, moved only
//! by the EMA rule) and the trainable agent `Sa`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ArtError, Result, TensorError};
use crate::params::{xavier, Bound, ParamStore};
use crate::rng::substream;
use crate::tensor::{io, Graph, Tensor, Var};

type TResult<T> = std::result::Result<T, TensorError>;

/// Where the initial bank comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", deny_unknown_fields)]
pub enum BankSource {
    /// Pre-extracted embeddings stored as an ARTT tensor.
    File { path: String },
    /// Class-clustered Gaussian embeddings.
    Synthetic { seed: u64, jitter: f64 },
}

/// Builds `S0` of shape `(templates, classes, dim)`.
///
/// Synthetic banks draw one Gaussian mean per class, add per-prompt jitter
/// and unit-normalize every vector.
pub fn generate_bank(
    class_names: &[String],
    templates: &[String],
    dim: usize,
    source: &BankSource,
) -> Result<Tensor> {
    let (n_prom, n_class) = (templates.len(), class_names.len());
    if n_prom == 0 || n_class == 0 || dim == 0 {
        return Err(ArtError::Config(
            "bank needs at least one template, one class and a positive width".into(),
        ));
    }
    match source {
        BankSource::File { path } => {
            let t = io::load(path)?;
            if t.dims() != [n_prom, n_class, dim] {
                return Err(ArtError::Format(format!(
                    "bank file {} has shape {:?}, expected {:?}",
                    path,
                    t.dims(),
                    [n_prom, n_class, dim]
                )));
            }
            Ok(t)
        }
        BankSource::Synthetic { seed, jitter } => {
            Ok(synthetic_bank(n_prom, n_class, dim, *seed, *jitter))
        }
    }
}

pub fn synthetic_bank(n_prom: usize, n_class: usize, dim: usize, seed: u64, jitter: f64) -> Tensor {
    let mut rng = substream(seed, "bank", 0);
    let means: Vec<Vec<f64>> = (0..n_class)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(n_prom * n_class * dim);
    for _ in 0..n_prom {
        for mean in &means {
            let mut v: Vec<f64> = mean
                .iter()
                .map(|m| m + jitter * { let z: f64 = StandardNormal.sample(&mut rng); z })
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            data.extend(v);
        }
    }
    Tensor::new(vec![n_prom, n_class, dim], data).expect("sized above")
}

/// Default names used when only counts are configured.
pub fn default_labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{} {}", prefix, i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBank {
    s0: Tensor,
    pub s: Tensor,
    pub sa: Tensor,
    pub mu: f64,
    pub eta: f64,
}

impl SemanticBank {
    pub fn new(s0: Tensor, mu: f64, eta: f64) -> Result<Self> {
        if s0.rank() != 3 {
            return Err(ArtError::Format(format!(
                "bank must be (N_prom, N_class, C_t), got {:?}",
                s0.dims()
            )));
        }
        Ok(SemanticBank {
            s: s0.clone(),
            sa: s0.clone(),
            s0,
            mu,
            eta,
        })
    }

    /// Frozen initial bank.
    pub fn s0(&self) -> &Tensor {
        &self.s0
    }

    pub fn n_prom(&self) -> usize {
        self.s0.dims()[0]
    }

    pub fn n_class(&self) -> usize {
        self.s0.dims()[1]
    }

    pub fn text_dim(&self) -> usize {
        self.s0.dims()[2]
    }

    /// Gradient step on the agent followed by the EMA pull of `S`.
    pub fn ema_update(&mut self, sa_grad: &[f64]) -> TResult<()> {
        let (s, sa) = ema_update(&self.s, &self.sa, sa_grad, self.eta, self.mu)?;
        self.s = s;
        self.sa = sa;
        Ok(())
    }

    pub fn save_dir(&self, dir: &Path, dtype: io::Dtype) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::save(dir.join("bank_s0.artt"), &self.s0, dtype)?;
        io::save(dir.join("bank_s.artt"), &self.s, dtype)?;
        io::save(dir.join("bank_sa.artt"), &self.sa, dtype)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path, mu: f64, eta: f64) -> Result<Self> {
        let s0 = io::load(dir.join("bank_s0.artt"))?;
        let mut bank = SemanticBank::new(s0, mu, eta)?;
        bank.s = io::load(dir.join("bank_s.artt"))?;
        bank.sa = io::load(dir.join("bank_sa.artt"))?;
        if bank.s.dims() != bank.s0.dims() || bank.sa.dims() != bank.s0.dims() {
            return Err(ArtError::Format("bank copies disagree in shape".into()));
        }
        Ok(bank)
    }
}

/// `Sa' = Sa − η·∇`, then `S' = μ·S + (1 − μ)·Sa'`.
pub fn ema_update(
    s: &Tensor,
    sa: &Tensor,
    grad: &[f64],
    eta: f64,
    mu: f64,
) -> TResult<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(TensorError::contract("ema_update", format!("mu {} outside [0, 1]", mu)));
    }
    if eta.is_nan() || eta < 0.0 {
        return Err(TensorError::contract("ema_update", format!("eta {} must be >= 0", eta)));
    }
    if s.dims() != sa.dims() || grad.len() != sa.numel() {
        return Err(TensorError::contract("ema_update", "shape mismatch between S, Sa and grad"));
    }
    let sa_new: Vec<f64> = sa.data().iter().zip(grad).map(|(a, g)| a - eta * g).collect();
    let s_new: Vec<f64> = if mu == 1.0 {
        s.data().to_vec()
    } else if mu == 0.0 {
        sa_new.clone()
    } else {
        s.data()
            .iter()
            .zip(&sa_new)
            .map(|(x, a)| mu * x + (1.0 - mu) * a)
            .collect()
    };
    let dims = s.dims().to_vec();
    Ok((
        Tensor::new(dims.clone(), s_new)?,
        Tensor::new(dims, sa_new)?,
    ))
}

/// For each class, the prompt vector with the highest cosine to that class's
/// prompt mean (lowest prompt index on ties). Output `(N_class, C_t)`.
pub fn pooled_class_semantics(s: &Tensor) -> Tensor {
    let (n_prom, n_class, dim) = (s.dims()[0], s.dims()[1], s.dims()[2]);
    let at = |i: usize, j: usize| &s.data()[(i * n_class + j) * dim..(i * n_class + j + 1) * dim];
    let mut out = Vec::with_capacity(n_class * dim);
    for j in 0..n_class {
        let mean: Vec<f64> = (0..dim)
            .map(|c| (0..n_prom).map(|i| at(i, j)[c]).sum::<f64>() / n_prom as f64)
            .collect();
        let mn = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for i in 0..n_prom {
            let v = at(i, j);
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = v.iter().zip(&mean).map(|(a, b)| a * b).sum();
            let c = if vn == 0.0 || mn == 0.0 { 0.0 } else { dot / (vn * mn) };
            if c > best_cos {
                best_cos = c;
                best = i;
            }
        }
        out.extend_from_slice(at(best, j));
    }
    Tensor::new(vec![n_class, dim], out).expect("sized above")
}

/// Prompt-pooled bank projected into the visual width: `(N_class, C)`.
pub fn class_semantics_for_selection(g: &mut Graph, s: &Tensor, proj: Var) -> TResult<Var> {
    let pooled = g.constant(&pooled_class_semantics(s))?;
    g.matmul(pooled, proj)
}

/// Names of the bank-side parameters in a [`ParamStore`].
pub const PROJ: &str = "bank.proj";
pub const MLP_W1: &str = "mlp.w1";
pub const MLP_B1: &str = "mlp.b1";
pub const MLP_W2: &str = "mlp.w2";
pub const MLP_B2: &str = "mlp.b2";

/// Registers the `C_t → C` projection and the `D → C_t → C_t` prototype MLP.
pub fn init_params<R: Rng>(store: &mut ParamStore, rng: &mut R, text_dim: usize, model_dim: usize, concat_dim: usize) {
    store.insert(PROJ, xavier(rng, text_dim, model_dim));
    store.insert(MLP_W1, xavier(rng, concat_dim, text_dim));
    store.insert(MLP_B1, Tensor::zeros(&[text_dim]));
    store.insert(MLP_W2, xavier(rng, text_dim, text_dim));
    store.insert(MLP_B2, Tensor::zeros(&[text_dim]));
}

/// Per-class winner-take-all scores: `max_i cos(x_cls, proj(Sa[i, j]))`,
/// as an `(N_class)` node.
pub fn video_scores(g: &mut Graph, x_cls: Var, sa: Var, proj: Var) -> TResult<Var> {
    let d = g.dims(sa).to_vec();
    if d.len() != 3 {
        return Err(TensorError::shape("video_consistency", format!("Sa {:?}", d)));
    }
    let (n_prom, n_class, dim) = (d[0], d[1], d[2]);
    let c = *g.dims(x_cls).last().unwrap_or(&0);
    let flat = g.reshape(sa, &[n_prom * n_class, dim])?;
    let projected = g.matmul(flat, proj)?;
    let unit = g.normalize_rows(projected)?;
    let x = g.reshape(x_cls, &[1, c])?;
    let x = g
        .normalize_rows(x)
        .map_err(|_| TensorError::degenerate("video_consistency", "x_cls has zero norm"))?;
    let xt = g.transpose(x)?;
    let cos = g.matmul(unit, xt)?;
    let cos = g.reshape(cos, &[n_prom, n_class])?;
    g.max(cos, 0)
}

/// Cross-entropy of the winner-take-all score vector against `label`.
pub fn video_consistency_loss(g: &mut Graph, x_cls: Var, sa: Var, proj: Var, label: usize) -> TResult<Var> {
    let n_class = g.dims(sa).get(1).copied().unwrap_or(0);
    if label >= n_class {
        return Err(TensorError::contract(
            "video_consistency",
            format!("label {} >= {} classes", label, n_class),
        ));
    }
    let scores = video_scores(g, x_cls, sa, proj)?;
    g.cross_entropy(scores, label)
}

/// Prototype MLP applied row-wise to `(N_class, D)` prototypes.
pub fn prototype_mlp(g: &mut Graph, b: &Bound, w: Var) -> TResult<Var> {
    let h = g.matmul(w, b.var(MLP_W1)?)?;
    let h = g.add_bias(h, b.var(MLP_B1)?)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, b.var(MLP_W2)?)?;
    g.add_bias(h, b.var(MLP_B2)?)
}

/// `(N_class, N_class)` prompt-averaged cosine matrix between prototype
/// embeddings and each prompt slice of `Sa`.
pub fn prototype_similarity(g: &mut Graph, mlp_out: Var, sa: Var) -> TResult<Var> {
    let n_prom = g.dims(sa)[0];
    let m = g.normalize_rows(mlp_out)?;
    let mut mats = Vec::with_capacity(n_prom);
    for i in 0..n_prom {
        let slice = g.index_axis0(sa, i)?;
        let unit = g.normalize_rows(slice)?;
        let ut = g.transpose(unit)?;
        mats.push(g.matmul(m, ut)?);
    }
    let s = g.add_n(&mats)?;
    g.scale(s, 1.0 / n_prom as f64)
}

/// Row-wise cross-entropy of a similarity matrix with target = row index;
/// mean over rows, or the plain sum when `sum_rows` is set.
pub fn prototype_loss_from_similarity(g: &mut Graph, sim: Var, sum_rows: bool) -> TResult<Var> {
    let n = g.dims(sim)[0];
    let mut terms = Vec::with_capacity(n);
    for r in 0..n {
        let row = g.narrow(sim, 0, r, 1)?;
        terms.push(g.cross_entropy(row, r)?);
    }
    let s = g.add_n(&terms)?;
    if sum_rows {
        Ok(s)
    } else {
        g.scale(s, 1.0 / n as f64)
    }
}

pub fn prototype_consistency_loss(g: &mut Graph, b: &Bound, w: Var, sa: Var, sum_rows: bool) -> TResult<Var> {
    let m = prototype_mlp(g, b, w)?;
    let sim = prototype_similarity(g, m, sa)?;
    prototype_loss_from_similarity(g, sim, sum_rows)
}

/// `L_video + L_prot`, unweighted.
pub fn sema_loss(g: &mut Graph, video: Var, prot: Var) -> TResult<Var> {
    g.add(video, prot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal_init;

    fn labels(n: usize) -> Vec<String> {
        default_labels("x", n)
    }

    #[test]
    fn synthetic_bank_is_deterministic_and_unit_norm() {
        let src = BankSource::Synthetic { seed: 9, jitter: 0.3 };
        let a = generate_bank(&labels(4), &labels(2), 32, &src).unwrap();
        let b = generate_bank(&labels(4), &labels(2), 32, &src).unwrap();
        assert_eq!(a.dims(), &[2, 4, 32]);
        assert_eq!(a, b);
        for v in a.data().chunks(32) {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_jitter_gives_identical_prompts() {
        let t = synthetic_bank(3, 2, 8, 1, 0.0);
        assert_eq!(t.index_axis0(0), t.index_axis0(1));
        assert_eq!(t.index_axis0(0), t.index_axis0(2));
    }

    #[test]
    fn file_bank_round_trip_and_shape_check() {
        let t = synthetic_bank(2, 3, 5, 4, 0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank_s0.artt");
        io::save(&path, &t, io::Dtype::F64).unwrap();
        let src = BankSource::File {
            path: path.to_string_lossy().into_owned(),
        };
        let back = generate_bank(&labels(3), &labels(2), 5, &src).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            generate_bank(&labels(4), &labels(2), 5, &src),
            Err(ArtError::Format(_))
        ));
    }

    #[test]
    fn ema_arithmetic() {
        let s = Tensor::vector(vec![0.5]);
        let sa = Tensor::vector(vec![1.5]);
        let (s2, sa2) = ema_update(&s, &sa, &[0.0], 0.1, 0.8).unwrap();
        assert!((s2.data()[0] - 0.7).abs() < 1e-15);
        assert_eq!(sa2, sa);
    }

    #[test]
    fn ema_fixpoint_and_copy_are_exact() {
        let mut rng = substream(2, "t", 0);
        let s = normal_init(&mut rng, &[2, 3, 4], 1.0);
        let sa = normal_init(&mut rng, &[2, 3, 4], 1.0);
        let grad = normal_init(&mut rng, &[2, 3, 4], 1.0);
        let (s1, sa1) = ema_update(&s, &sa, grad.data(), 0.05, 1.0).unwrap();
        assert!(s1.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let (s0, sa0) = ema_update(&s, &sa, grad.data(), 0.05, 0.0).unwrap();
        assert!(s0.data().iter().zip(sa0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(sa0, sa1);
    }

    #[test]
    fn ema_rejects_bad_arguments() {
        let s = Tensor::vector(vec![0.0, 1.0]);
        assert!(ema_update(&s, &s, &[0.0, 0.0], 0.1, 1.2).is_err());
        assert!(ema_update(&s, &s, &[0.0], 0.1, 0.5).is_err());
    }

    #[test]
    fn single_prompt_pooling_is_identity() {
        let t = synthetic_bank(1, 4, 6, 3, 0.5);
        assert_eq!(pooled_class_semantics(&t), t.index_axis0(0));
    }

    #[test]
    fn duplicated_prompts_pool_identically() {
        let t = synthetic_bank(2, 3, 6, 3, 0.5);
        let doubled = Tensor::new(vec![4, 3, 6], [t.data(), t.data()].concat()).unwrap();
        assert_eq!(pooled_class_semantics(&t), pooled_class_semantics(&doubled));
    }

    #[test]
    fn selection_semantics_shape() {
        let t = synthetic_bank(3, 4, 32, 3, 0.5);
        let mut rng = substream(1, "t", 0);
        let mut g = Graph::new();
        let proj = g.constant(&xavier(&mut rng, 32, 64)).unwrap();
        let out = class_semantics_for_selection(&mut g, &t, proj).unwrap();
        assert_eq!(g.dims(out), &[4, 64]);
    }

    #[test]
    fn winner_take_all_takes_the_max_prompt() {
        // proj = identity so the cosines are chosen directly
        let c = 2;
        let sa = Tensor::new(
            vec![3, 1, c],
            vec![
                0.2, (1.0f64 - 0.04).sqrt(),
                0.9, (1.0f64 - 0.81).sqrt(),
                0.4, (1.0f64 - 0.16).sqrt(),
            ],
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![1.0, 0.0])).unwrap();
        let sav = g.constant(&sa).unwrap();
        let proj = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let s = video_scores(&mut g, x, sav, proj).unwrap();
        assert!((g.value(s)[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn equal_scores_give_ln2() {
        let sa = Tensor::new(vec![1, 2, 2], vec![0.6, 0.8, 0.6, -0.8]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![1.0, 0.0])).unwrap();
        let sav = g.constant(&sa).unwrap();
        let proj = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let l = video_consistency_loss(&mut g, x, sav, proj, 1).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_class_token_is_degenerate() {
        let sa = synthetic_bank(1, 2, 2, 0, 0.0);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        let sav = g.constant(&sa).unwrap();
        let proj = g.constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        assert!(matches!(
            video_consistency_loss(&mut g, x, sav, proj, 0),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn identity_similarity_loss() {
        let mut g = Graph::new();
        let eye = g
            .constant(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        let l = prototype_loss_from_similarity(&mut g, eye, false).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        assert!((g.scalar(l) - 0.31326).abs() < 1e-4);

        let flat = g.constant(&Tensor::from_fn(&[3, 3], |_| 0.25)).unwrap();
        let l = prototype_loss_from_similarity(&mut g, flat, false).unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);
        let l = prototype_loss_from_similarity(&mut g, flat, true).unwrap();
        assert!((g.scalar(l) - 3.0 * 3f64.ln()).abs() < 1e-12);
    }
}
