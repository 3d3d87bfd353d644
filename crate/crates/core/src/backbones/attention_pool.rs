use super::BackboneConfig;
use crate::engine::{EngineError, Tensor, Var};
use crate::optim::Param;

pub(super) fn init_params(params: &mut Vec<Param>, c: &BackboneConfig, init: &mut dyn FnMut(usize, usize, f64) -> Tensor) {
    params.push(Param::weight("att_v", init(c.h, c.h, 1.0)));
    params.push(Param::weight("att_u", init(c.h, c.h, 1.0)));
    params.push(Param::weight("att_w", init(c.h, 1, 1.0)));
}

/// Gated attention logits `w·(tanh(V t) ⊙ σ(U t))`, one per token row.
pub(super) fn attention_logits<'g>(head: &[Var<'g>], tokens: Var<'g>) -> Result<Var<'g>, EngineError> {
    let gate = tokens.matmul(head[0])?.tanh()?.mul(tokens.matmul(head[1])?.sigmoid()?)?;
    gate.matmul(head[2])
}

/// Softmax-attention pooling. Soft weights also weight the attention mass,
/// so a zero weight removes the tile exactly.
pub(super) fn pool<'g>(
    head: &[Var<'g>],
    tokens: Var<'g>,
    weights: Option<Var<'g>>,
) -> Result<(Var<'g>, Var<'g>), EngineError> {
    let scores = attention_logits(head, tokens)?;
    let weights_row = weights.map(|w| w.transpose()).transpose()?;
    let attention = scores.transpose()?.softmax_masked(None, weights_row)?;
    Ok((attention.matmul(tokens)?, scores))
}
