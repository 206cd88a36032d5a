//! Named parameter storage, graph binding and checkpoint directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ArtError, Result, TensorError};
use crate::tensor::io::{self, Dtype};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered map of parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Parameter name to graph node, for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::contract("bind", format!("unknown parameter {}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Binding from explicit nodes, e.g. inputs of a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound, TensorError> {
        self.bind_with(g, true)
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<Bound, TensorError> {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> Result<Bound, TensorError> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable { g.leaf(t)? } else { g.constant(t)? };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Collects `dLoss/dparam` for every bound parameter; missing grads are zero.
    pub fn collect_grads(&self, g: &Graph, bound: &Bound) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, t)| {
                let grad = bound
                    .vars
                    .get(name)
                    .and_then(|v| g.grad(*v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = Manifest {
            dtype,
            params: BTreeMap::new(),
        };
        for (name, t) in &self.params {
            let file = format!("{}.artt", name);
            io::save(dir.join(&file), t, dtype)?;
            manifest.params.insert(name.clone(), file);
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut store = ParamStore::new();
        for (name, file) in manifest.params {
            if file.contains('/') || file.contains("..") {
                return Err(ArtError::Format(format!("suspicious file name {}", file)));
            }
            store.insert(name, io::load(dir.join(file))?);
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: Dtype,
    params: BTreeMap<String, String>,
}

/// Gaussian init with standard deviation `std`.
pub fn normal_init<R: Rng>(rng: &mut R, dims: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Tensor::from_fn(dims, |_| dist.sample(rng))
}

/// Xavier/Glorot-style init for a `(fan_in, fan_out)` matrix.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_init(rng, &[fan_in, fan_out], std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn checkpoint_dir_round_trip() {
        let mut rng = substream(1, "init", 0);
        let mut store = ParamStore::new();
        store.insert("layer.w", xavier(&mut rng, 3, 4));
        store.insert("layer.b", Tensor::vector(vec![0.5, -0.25]));
        let dir = tempfile::tempdir().unwrap();
        store.save_dir(dir.path(), Dtype::F64).unwrap();
        let back = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn missing_grads_are_zero() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0, 2.0]));
        store.insert("b", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let s = g.sum_all(bound.var("a").unwrap()).unwrap();
        g.backward(s).unwrap();
        let grads = store.collect_grads(&g, &bound);
        assert_eq!(grads["a"], vec![1.0, 1.0]);
        assert_eq!(grads["b"], vec![0.0]);
    }
}
