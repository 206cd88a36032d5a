//! Tracklet formation and saliency-weighted aggregation.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Graph, Tensor, Var};

/// Normalization of the saliency-weighted tracklet sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// `(1/T)·Σ_t r_t·w_t`, keeping the extra `1/T` on top of the softmax.
    #[default]
    Literal,
    /// `Σ_t r_t·w_t / Σ_t w_t`. The saliency weights already sum to one, so
    /// this is the literal form without the `1/T`.
    Normalized,
}

/// Re-indexes `T` response sets of shape `(K, C)` into `K` tracklets of
/// shape `(T, C)`.
pub fn form_tracklets(responses: &[Tensor]) -> Result<Vec<Tensor>, TensorError> {
    let first = responses
        .first()
        .ok_or_else(|| TensorError::contract("form_tracklets", "no frames"))?;
    let (k, c) = match first.dims() {
        [k, c] => (*k, *c),
        d => return Err(TensorError::shape("form_tracklets", format!("{:?}", d))),
    };
    if responses.iter().any(|r| r.dims() != [k, c]) {
        return Err(TensorError::contract(
            "form_tracklets",
            "response sets disagree on K or C across frames",
        ));
    }
    let t_len = responses.len();
    Ok((0..k)
        .map(|q| {
            let data: Vec<f64> = responses.iter().flat_map(|r| r.row(q).to_vec()).collect();
            Tensor::new(vec![t_len, c], data).expect("sized above")
        })
        .collect())
}

/// Inverse of [`form_tracklets`].
pub fn unform_tracklets(tracklets: &[Tensor]) -> Result<Vec<Tensor>, TensorError> {
    form_tracklets(tracklets)
}

/// Graph version of [`form_tracklets`]: row `t` of tracklet `k` is row `k`
/// of frame `t`.
pub fn form_tracklets_graph(g: &mut Graph, responses: &[Var]) -> Result<Vec<Var>, TensorError> {
    let first = *responses
        .first()
        .ok_or_else(|| TensorError::contract("form_tracklets", "no frames"))?;
    let dims = g.dims(first).to_vec();
    if dims.len() != 2 || responses.iter().any(|r| g.dims(*r) != dims.as_slice()) {
        return Err(TensorError::contract(
            "form_tracklets",
            "response sets disagree on K or C across frames",
        ));
    }
    let stacked = g.concat(responses, 1)?;
    // (K, T·C) -> K rows, each reshaped to (T, C)
    (0..dims[0])
        .map(|k| {
            let row = g.narrow(stacked, 0, k, 1)?;
            g.reshape(row, &[responses.len(), dims[1]])
        })
        .collect()
}

/// Temporal saliency weights `(T)`: for every semantic, softmax over frames
/// of `⟨s_i, r_t⟩`, averaged over semantics.
pub fn saliency_weights(g: &mut Graph, tracklet: Var, semantics: Var) -> Result<Var, TensorError> {
    let t_len = g.dims(tracklet).first().copied().unwrap_or(0);
    if t_len == 0 {
        return Err(TensorError::contract("aggregate_tracklet", "T == 0"));
    }
    let tt = g.transpose(tracklet)?;
    let scores = g.matmul(semantics, tt)?;
    let w = g.softmax(scores, 1)?;
    g.mean(w, 0)
}

/// Saliency-weighted tracklet summary of shape `(1, C)`.
pub fn aggregate_tracklet(
    g: &mut Graph,
    tracklet: Var,
    semantics: Var,
    mode: AggregationMode,
) -> Result<Var, TensorError> {
    let t_len = g.dims(tracklet).first().copied().unwrap_or(0);
    let w = saliency_weights(g, tracklet, semantics)?;
    let w = g.reshape(w, &[1, t_len])?;
    let agg = g.matmul(w, tracklet)?;
    match mode {
        AggregationMode::Literal => g.scale(agg, 1.0 / t_len as f64),
        AggregationMode::Normalized => Ok(agg),
    }
}

/// Plain temporal mean of a `(T, C)` tracklet, as `(1, C)`.
pub fn mean_pool(g: &mut Graph, tracklet: Var) -> Result<Var, TensorError> {
    let c = g.dims(tracklet)[1];
    let m = g.mean(tracklet, 0)?;
    g.reshape(m, &[1, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn two_by_two_formation() {
        let r1 = t(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let r2 = t(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let tr = form_tracklets(&[r1.clone(), r2.clone()]).unwrap();
        assert_eq!(tr[0], t(&[vec![1.0, 2.0], vec![5.0, 6.0]]));
        assert_eq!(tr[1], t(&[vec![3.0, 4.0], vec![7.0, 8.0]]));
        assert_eq!(unform_tracklets(&tr).unwrap(), vec![r1, r2]);
    }

    #[test]
    fn single_query_tracklet_is_the_stack() {
        let frames: Vec<Tensor> = (0..3).map(|i| t(&[vec![i as f64, -(i as f64)]])).collect();
        let tr = form_tracklets(&frames).unwrap();
        assert_eq!(tr.len(), 1);
        assert_eq!(tr[0].data(), &[0.0, -0.0, 1.0, -1.0, 2.0, -2.0]);
    }

    #[test]
    fn inconsistent_k_is_contract_error() {
        let a = t(&[vec![1.0], vec![2.0]]);
        let b = t(&[vec![1.0]]);
        assert!(matches!(form_tracklets(&[a, b]), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn graph_formation_matches_tensor_formation() {
        let frames: Vec<Tensor> = (0..3)
            .map(|i| Tensor::from_fn(&[2, 4], |j| (i * 10 + j) as f64))
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = frames.iter().map(|f| g.constant(f).unwrap()).collect();
        let tr = form_tracklets_graph(&mut g, &vars).unwrap();
        let expected = form_tracklets(&frames).unwrap();
        for (v, e) in tr.iter().zip(&expected) {
            assert_eq!(&g.tensor(*v), e);
        }
    }

    #[test]
    fn hand_evaluated_aggregation() {
        let mut g = Graph::new();
        let tr = g.constant(&t(&[vec![2.0, 0.0], vec![2.0, 0.0]])).unwrap();
        let s = g.constant(&t(&[vec![1.0, 0.0]])).unwrap();
        let w = saliency_weights(&mut g, tr, s).unwrap();
        assert_eq!(g.value(w), &[0.5, 0.5]);
        let a = aggregate_tracklet(&mut g, tr, s, AggregationMode::Literal).unwrap();
        assert_eq!(g.value(a), &[1.0, 0.0]);
        let a = aggregate_tracklet(&mut g, tr, s, AggregationMode::Normalized).unwrap();
        assert_eq!(g.value(a), &[2.0, 0.0]);
    }

    #[test]
    fn single_frame_aggregation_returns_the_frame() {
        let mut g = Graph::new();
        let tr = g.constant(&t(&[vec![0.3, -1.5, 2.0]])).unwrap();
        let s = g.constant(&t(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 1.0]])).unwrap();
        let a = aggregate_tracklet(&mut g, tr, s, AggregationMode::Literal).unwrap();
        assert_eq!(g.value(a), &[0.3, -1.5, 2.0]);
    }

    #[test]
    fn empty_tracklet_is_contract_error() {
        let mut g = Graph::new();
        let tr = g.constant(&Tensor::zeros(&[0, 2])).unwrap();
        let s = g.constant(&t(&[vec![1.0, 0.0]])).unwrap();
        assert!(matches!(
            aggregate_tracklet(&mut g, tr, s, AggregationMode::Literal),
            Err(TensorError::Contract { .. })
        ));
    }
}
