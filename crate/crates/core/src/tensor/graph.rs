use super::{axis_layout, gelu, gelu_grad, matmul_raw, transpose_raw, Tensor};
use crate::error::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Identity(Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias { a: Var, bias: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize, len: usize },
    Mean { a: Var, axis: usize },
    SumAll(Var),
    Transpose { a: Var, m: usize, n: usize },
    Reshape(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Softmax { a: Var, axis: usize },
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    NormalizeRows { a: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, target: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    Max { a: Var, axis: usize, argmax: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are recorded in evaluation order, so the append order is already a
/// topological order and [`Graph::backward`] simply walks it in reverse.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        dims: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        check_input("leaf", t)?;
        self.push("leaf", t.dims.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Gradient-isolated input.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        check_input("constant", t)?;
        self.push("constant", t.dims.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            dims: n.dims.clone(),
            data: n.value.clone(),
        }
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated by the last backward pass, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.dims(v) {
            [m, n] => Ok((*m, *n)),
            d => Err(TensorError::shape(op, format!("expected rank 2, got {:?}", d))),
        }
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn identity(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = &self.nodes[a.0];
        let (dims, value) = (n.dims.clone(), n.value.clone());
        let ng = self.ng(a);
        self.push("identity", dims, value, Op::Identity(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dims {} vs {}", k, k2),
            ));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, ng)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_dims(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let dims = self.dims(a).to_vec();
        self.push(name, dims, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let out: Vec<f64> = self.value(a).iter().map(|x| f(*x)).collect();
        let dims = self.dims(a).to_vec();
        let ng = self.ng(a);
        self.push(name, dims, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("gelu", a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Adds a vector along the trailing axis: `(…, n) + (n)`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let n = *self.dims(a).last().unwrap_or(&1);
        if self.dims(bias) != [n] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", self.dims(bias), self.dims(a)),
            ));
        }
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let ng = self.ng(a) || self.ng(bias);
        let dims = self.dims(a).to_vec();
        self.push("add_bias", dims, out, Op::AddBias { a, bias }, ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::shape("concat", format!("axis {} for {:?}", axis, base)));
        }
        let mut total = 0;
        for v in inputs {
            let d = self.dims(*v);
            if d.len() != base.len()
                || d.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::shape("concat", format!("{:?} vs {:?}", d, base)));
            }
            total += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.dims(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let ng = inputs.iter().any(|v| self.ng(*v));
        self.push(
            "concat",
            dims,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn narrow(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let (outer, n, inner) = axis_layout("narrow", self.dims(a), axis)?;
        if start + len > n || len == 0 {
            return Err(TensorError::shape(
                "narrow",
                format!("range {}..{} of extent {}", start, start + len, n),
            ));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut dims = self.dims(a).to_vec();
        dims[axis] = len;
        let ng = self.ng(a);
        self.push("narrow", dims, out, Op::Narrow { a, axis, start, len }, ng)
    }

    /// Sub-tensor at index `i` of the leading axis (rank drops by one).
    pub fn index_axis0(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        let n = self.narrow(a, 0, i, 1)?;
        let dims = self.dims(a)[1..].to_vec();
        self.reshape(n, &dims)
    }

    /// Mean along `axis`; the axis is removed.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, n, inner) = axis_layout("mean", self.dims(a), axis)?;
        if n == 0 {
            return Err(TensorError::shape("mean", "empty axis"));
        }
        let src = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= n as f64);
        let mut dims = self.dims(a).to_vec();
        dims.remove(axis);
        let ng = self.ng(a);
        self.push("mean", dims, out, Op::Mean { a, axis }, ng)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push("sum_all", vec![], vec![s], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::shape("mean_all", "empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of scalar nodes.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var, TensorError> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| TensorError::shape("add_n", "no terms"))?;
        let mut acc = *first;
        for t in rest {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("transpose", a)?;
        let out = transpose_raw(self.value(a), m, n);
        let ng = self.ng(a);
        self.push("transpose", vec![n, m], out, Op::Transpose { a, m, n }, ng)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var, TensorError> {
        let n: usize = dims.iter().product();
        if n != self.value(a).len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.dims(a), dims),
            ));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        self.push("reshape", dims.to_vec(), out, Op::Reshape(a), ng)
    }

    /// Normalizes over the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let n = *self
            .dims(a)
            .last()
            .ok_or_else(|| TensorError::shape("layer_norm", "scalar input"))?;
        if self.dims(gamma) != [n] || self.dims(beta) != [n] {
            return Err(TensorError::shape("layer_norm", "affine params must be (n)"));
        }
        let src = self.value(a);
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &src[r * n..(r + 1) * n];
            let mu = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                xhat[r * n + j] = (x[j] - mu) * rs;
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, x)| x * g[i % n] + b[i % n])
            .collect();
        let dims = self.dims(a).to_vec();
        let ng = self.ng(a) || self.ng(gamma) || self.ng(beta);
        self.push(
            "layer_norm",
            dims,
            out,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, n, inner) = axis_layout("softmax", self.dims(a), axis)?;
        if n == 0 {
            return Err(TensorError::shape("softmax", "empty axis"));
        }
        let mut out = self.value(a).to_vec();
        softmax_in_place(&mut out, outer, n, inner);
        let dims = self.dims(a).to_vec();
        let ng = self.ng(a);
        self.push("softmax", dims, out, Op::Softmax { a, axis }, ng)
    }

    /// Cosine similarity of two equally sized tensors, viewed flat.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(TensorError::shape(
                "cosine",
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::degenerate("cosine", "zero-norm input"));
        }
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let c = (dot / (na * nb)).clamp(-1.0, 1.0);
        let ng = self.ng(a) || self.ng(b);
        self.push("cosine", vec![], vec![c], Op::Cosine { a, b, na, nb }, ng)
    }

    /// L2-normalizes each slice along the trailing axis.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = *self
            .dims(a)
            .last()
            .ok_or_else(|| TensorError::shape("normalize_rows", "scalar input"))?;
        let src = self.value(a);
        let rows = src.len() / n;
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for r in 0..rows {
            let x = &src[r * n..(r + 1) * n];
            let nr = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr == 0.0 {
                return Err(TensorError::degenerate("normalize_rows", format!("row {} has zero norm", r)));
            }
            norms.push(nr);
            out.extend(x.iter().map(|v| v / nr));
        }
        let dims = self.dims(a).to_vec();
        let ng = self.ng(a);
        self.push("normalize_rows", dims, out, Op::NormalizeRows { a, norms }, ng)
    }

    /// Negative log-softmax of `logits` at `target`. Accepts `(n)` or `(1, n)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let d = self.dims(logits);
        let n = match d {
            [n] | [1, n] => *n,
            _ => return Err(TensorError::shape("cross_entropy", format!("logits {:?}", d))),
        };
        if target >= n {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("target {} >= {} classes", target, n),
            ));
        }
        let z = self.value(logits);
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let ng = self.ng(logits);
        self.push("cross_entropy", vec![], vec![loss], Op::CrossEntropy { logits, target }, ng)
    }

    /// Selects rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims2("gather_rows", a)?;
        if let Some(bad) = idx.iter().find(|i| **i >= m) {
            return Err(TensorError::shape("gather_rows", format!("index {} >= {}", bad, m)));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let ng = self.ng(a);
        self.push(
            "gather_rows",
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Row lookup in an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.gather_rows(table, ids)
    }

    /// Max along `axis` (removed). Ties resolve to the lowest index, which
    /// also receives the whole gradient.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (outer, n, inner) = axis_layout("max", self.dims(a), axis)?;
        if n == 0 {
            return Err(TensorError::shape("max", "empty axis"));
        }
        let src = self.value(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = src[o * n * inner + i];
                for j in 1..n {
                    let v = src[(o * n + j) * inner + i];
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out[o * inner + i] = bv;
                argmax[o * inner + i] = best;
            }
        }
        let mut dims = self.dims(a).to_vec();
        dims.remove(axis);
        let ng = self.ng(a);
        self.push("max", dims, out, Op::Max { a, axis, argmax }, ng)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate onto whatever
    /// the previous pass left until [`Graph::zero_grad`] is called.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got {:?}", self.dims(loss)),
            ));
        }
        self.backward_from(loss, vec![1.0])
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_from(&mut self, root: Var, seed: Vec<f64>) -> Result<(), TensorError> {
        if seed.len() != self.value(root).len() {
            return Err(TensorError::shape("backward", "seed size mismatch"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        if self.grads.len() < grads.len() {
            self.grads.resize(grads.len(), None);
        }
        for (slot, g) in self.grads.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Identity(a) | Op::Reshape(a) | Op::AddScalar(a) => acc(*a, gout.to_vec()),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.ng(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    acc(*a, matmul_raw(gout, &bt, m, n, k));
                }
                if self.ng(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    acc(*b, matmul_raw(&at, gout, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, gout.iter().zip(bv).map(|(g, y)| g * y).collect());
                acc(*b, gout.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(*a, gout.iter().map(|g| g * c).collect()),
            Op::AddBias { a, bias } => {
                acc(*a, gout.to_vec());
                let n = self.value(*bias).len();
                let mut gb = vec![0.0; n];
                for (i, g) in gout.iter().enumerate() {
                    gb[i % n] += g;
                }
                acc(*bias, gb);
            }
            Op::Concat { inputs, axis } => {
                let inner: usize = node.dims[axis + 1..].iter().product();
                let outer: usize = node.dims[..*axis].iter().product();
                let total = node.dims[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.dims(*v)[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        let base = o * total + offset;
                        g.extend_from_slice(&gout[base..base + len]);
                    }
                    acc(*v, g);
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start, len } => {
                let dims = self.dims(*a);
                let inner: usize = dims[axis + 1..].iter().product();
                let outer: usize = dims[..*axis].iter().product();
                let n = dims[*axis];
                let mut g = vec![0.0; self.value(*a).len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gout[src..src + len * inner]);
                }
                acc(*a, g);
            }
            Op::Mean { a, axis } => {
                let dims = self.dims(*a);
                let inner: usize = dims[axis + 1..].iter().product();
                let outer: usize = dims[..*axis].iter().product();
                let n = dims[*axis];
                let mut g = vec![0.0; self.value(*a).len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            g[(o * n + j) * inner + i] = gout[o * inner + i] / n as f64;
                        }
                    }
                }
                acc(*a, g);
            }
            Op::SumAll(a) => acc(*a, vec![gout[0]; self.value(*a).len()]),
            Op::Transpose { a, m, n } => acc(*a, transpose_raw(gout, *n, *m)),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let g = self.value(*gamma);
                let rows = xhat.len() / n;
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let xr = &xhat[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * g[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                    }
                    mean_dxhat /= n as f64;
                    mean_dxhat_xhat /= n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * g[j];
                        dx[r * n + j] = rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                acc(*a, dx);
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::Gelu(a) => acc(
                *a,
                gout.iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| g * gelu_grad(*x))
                    .collect(),
            ),
            Op::Relu(a) => acc(
                *a,
                gout.iter()
                    .zip(self.value(*a))
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax { a, axis } => {
                let (outer, n, inner) =
                    axis_layout("softmax", &node.dims, *axis).expect("checked in forward");
                let y = &node.value;
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            g[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                acc(*a, g);
            }
            Op::Cosine { a, b, na, nb } => {
                let c = node.value[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let go = gout[0];
                let ga: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| go * (y / (na * nb) - c * x / (na * na)))
                    .collect();
                let gb: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| go * (x / (na * nb) - c * y / (nb * nb)))
                    .collect();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::NormalizeRows { a, norms } => {
                let y = &node.value;
                let n = y.len() / norms.len();
                let mut g = vec![0.0; y.len()];
                for (r, nr) in norms.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(u, v)| u * v).sum();
                    for j in 0..n {
                        g[r * n + j] = (gr[j] - yr[j] * dot) / nr;
                    }
                }
                acc(*a, g);
            }
            Op::CrossEntropy { logits, target } => {
                let z = self.value(*logits);
                let mut p = z.to_vec();
                softmax_in_place(&mut p, 1, z.len(), 1);
                p[*target] -= 1.0;
                acc(*logits, p.iter().map(|v| v * gout[0]).collect());
            }
            Op::GatherRows { a, idx } => {
                let n = node.dims[1];
                let mut g = vec![0.0; self.value(*a).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        g[i * n + j] += gout[r * n + j];
                    }
                }
                acc(*a, g);
            }
            Op::Max { a, axis, argmax } => {
                let (outer, n, inner) =
                    axis_layout("max", self.dims(*a), *axis).expect("checked in forward");
                let mut g = vec![0.0; self.value(*a).len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        g[(o * n + j) * inner + i] += gout[o * inner + i];
                    }
                }
                acc(*a, g);
            }
        }
    }
}

fn check_input(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::degenerate(op, "non-finite input"))
    }
}

pub(crate) fn softmax_in_place(x: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mx = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - mx).exp();
                x[at(j)] = e;
                sum += e;
            }
            for j in 0..n {
                x[at(j)] /= sum;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(&mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let v = g.constant(&mat(&[&[2.0], &[3.0]])).unwrap();
        let out = g.matmul(i, v).unwrap();
        assert_eq!(g.value(out), &[2.0, 3.0]);

        let a = g.constant(&mat(&[&[1.0, 2.0]])).unwrap();
        let b = g.constant(&mat(&[&[3.0], &[4.0]])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_analytic_values() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
        let x = g.constant(&Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_axis_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[3, 0])).unwrap();
        assert!(matches!(g.softmax(x, 1), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn cosine_cases() {
        let mut g = Graph::new();
        let mut cos = |a: Vec<f64>, b: Vec<f64>| {
            let a = g.constant(&Tensor::vector(a)).unwrap();
            let b = g.constant(&Tensor::vector(b)).unwrap();
            g.cosine(a, b).map(|c| g.scalar(c))
        };
        assert_eq!(cos(vec![1.0, 0.0], vec![0.0, 1.0]).unwrap(), 0.0);
        let h = 0.5f64.sqrt();
        assert!((cos(vec![1.0, 0.0], vec![h, h]).unwrap() - 0.70711).abs() < 1e-5);
        assert_eq!(cos(vec![3.0, 0.0], vec![7.0, 0.0]).unwrap(), 1.0);
        assert!(matches!(
            cos(vec![0.0, 0.0], vec![1.0, 0.0]),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn cosine_grad_vanishes_at_reference() {
        let mut g = Graph::new();
        let x0 = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let x = g.leaf(&x0).unwrap();
        let r = g.constant(&x0).unwrap();
        let c = g.cosine(x, r).unwrap();
        g.backward(c).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn softmax_sum_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![0.1, -2.0, 3.0, 0.5])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn identity_chain_passes_upstream_exactly() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let y = g.identity(x).unwrap();
        let seed = vec![0.1, -7.25, 1e-300];
        g.backward_from(y, seed.clone()).unwrap();
        assert_eq!(g.grad(x).unwrap(), seed.as_slice());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = g.constant(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![1e308, 1e308])).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn max_ties_take_lowest_index() {
        let mut g = Graph::new();
        let x = g.leaf(&mat(&[&[1.0, 5.0], &[5.0, 2.0]])).unwrap();
        let m = g.max(x, 0).unwrap();
        assert_eq!(g.value(m), &[5.0, 5.0]);
        let s = g.sum_all(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);

        let y = g.leaf(&Tensor::vector(vec![2.0, 2.0])).unwrap();
        let m = g.max(y, 0).unwrap();
        g.zero_grad();
        g.backward(m).unwrap();
        assert_eq!(g.grad(y).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn concat_and_narrow_invert() {
        let mut g = Graph::new();
        let a = g.constant(&mat(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = g.constant(&mat(&[&[5.0], &[6.0]])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.dims(c), &[2, 3]);
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        let rows = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.dims(rows), &[4, 2]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_n() {
        let mut g = Graph::new();
        let z = g.constant(&Tensor::vector(vec![0.0; 4])).unwrap();
        let l = g.cross_entropy(z, 2).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(g.cross_entropy(z, 4), Err(TensorError::Contract { .. })));
    }
}
