use super::BackboneConfig;
use crate::engine::{EngineError, Graph, Tensor, Var};
use crate::optim::Param;

pub(super) fn init_params(params: &mut Vec<Param>, c: &BackboneConfig, init: &mut dyn FnMut(usize, usize, f64) -> Tensor) {
    params.push(Param::weight("score_w", init(c.h, 1, 1.0)));
    params.push(Param::bias("score_b", Tensor::zeros(1, 1)));
}

/// Indices of the `k` largest values, ties by index ascending.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k.min(values.len()));
    order
}

/// Mean of the top-`k_pool` scored tokens. The selection mask carries a
/// sigmoid straight-through surrogate so the scorer trains.
pub(super) fn pool<'g>(
    g: &'g Graph,
    config: &BackboneConfig,
    head: &[Var<'g>],
    tokens: Var<'g>,
) -> Result<(Var<'g>, Var<'g>), EngineError> {
    let scores = tokens.matmul(head[0])?.add(head[1])?;
    let n = scores.rows();
    let k = config.k_pool.min(n);
    let values = scores.value();
    let mut hard = vec![0.0; n];
    for i in top_k_indices(values.data(), k) {
        hard[i] = 1.0;
    }
    // σ − stopgrad(σ) is exactly zero, so the forward value is exactly `hard`
    let surrogate = scores.sigmoid()?;
    let mask = surrogate
        .sub(surrogate.stop_grad())?
        .add(g.constant_owned(Tensor::column_vector(hard))?)?;
    let pooled = mask.transpose()?.matmul(tokens)?.scale(1.0 / k as f64)?;
    Ok((pooled, scores))
}
