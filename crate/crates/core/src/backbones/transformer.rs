use super::{Backbone, BackboneConfig, BackboneError, PaddingMask};
use crate::bags::Bag;
use crate::engine::{EngineError, Graph, Tensor, Var};
use crate::optim::Param;

const PER_HEAD: usize = 4;
const FFN: usize = 4;

fn per_layer(c: &BackboneConfig) -> usize {
    PER_HEAD * c.heads + FFN
}

pub(super) fn init_params(params: &mut Vec<Param>, c: &BackboneConfig, init: &mut dyn FnMut(usize, usize, f64) -> Tensor) {
    assert!(c.heads >= 1 && c.h.is_multiple_of(c.heads), "h must be divisible by heads");
    let dh = c.h / c.heads;
    params.push(Param::bias("cls_token", init(1, c.h, 1.0)));
    for l in 0..c.layers {
        for k in 0..c.heads {
            params.push(Param::weight(&format!("l{l}_h{k}_q"), init(c.h, dh, 1.0)));
            params.push(Param::weight(&format!("l{l}_h{k}_k"), init(c.h, dh, 1.0)));
            params.push(Param::weight(&format!("l{l}_h{k}_v"), init(c.h, dh, 1.0)));
            params.push(Param::weight(&format!("l{l}_h{k}_o"), init(dh, c.h, 0.5)));
        }
        params.push(Param::weight(&format!("l{l}_ffn_w1"), init(c.h, c.h, 1.0)));
        params.push(Param::bias(&format!("l{l}_ffn_b1"), Tensor::zeros(1, c.h)));
        params.push(Param::weight(&format!("l{l}_ffn_w2"), init(c.h, c.h, 0.5)));
        params.push(Param::bias(&format!("l{l}_ffn_b2"), Tensor::zeros(1, c.h)));
    }
}

/// Runs the blocks over `[CLS; tokens]` and returns the final states.
/// `key_mask` is an additive mask over the `n` tile keys; the CLS key is
/// never masked. Attention matrices are pushed to `maps` when given.
fn encode<'g>(
    c: &BackboneConfig,
    head: &[Var<'g>],
    tokens: Var<'g>,
    key_mask: Option<&[f64]>,
    mut maps: Option<&mut Vec<Tensor>>,
) -> Result<Var<'g>, EngineError> {
    let dh = c.h / c.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let full_mask: Option<Vec<f64>> = key_mask.map(|m| std::iter::once(0.0).chain(m.iter().copied()).collect());
    let mut x = head[0].concat_rows(tokens)?;
    for l in 0..c.layers {
        let p = &head[1 + l * per_layer(c)..1 + (l + 1) * per_layer(c)];
        let mut attended: Option<Var<'g>> = None;
        for k in 0..c.heads {
            let w = &p[k * PER_HEAD..(k + 1) * PER_HEAD];
            let q = x.matmul(w[0])?;
            let kk = x.matmul(w[1])?;
            let v = x.matmul(w[2])?;
            let logits = q.matmul(kk.transpose()?)?.scale(scale)?;
            let att = logits.softmax_masked(full_mask.as_deref(), None)?;
            if let Some(maps) = maps.as_deref_mut() {
                maps.push(att.value());
            }
            let out = att.matmul(v)?.matmul(w[3])?;
            attended = Some(match attended {
                Some(acc) => acc.add(out)?,
                None => out,
            });
        }
        if let Some(a) = attended {
            x = x.add(a)?;
        }
        let f = &p[c.heads * PER_HEAD..];
        let hidden = x.matmul(f[0])?.add(f[1])?.tanh()?;
        x = x.add(hidden.matmul(f[2])?.add(f[3])?)?;
    }
    Ok(x)
}

/// Final CLS state and the CLS-dot-product score of every tile.
pub(super) fn pool<'g>(
    c: &BackboneConfig,
    head: &[Var<'g>],
    tokens: Var<'g>,
    key_mask: Option<&[f64]>,
) -> Result<(Var<'g>, Var<'g>), EngineError> {
    let n = tokens.rows();
    let x = encode(c, head, tokens, key_mask, None)?;
    let cls = x.gather_rows(&[0])?;
    let tiles: Vec<usize> = (1..=n).collect();
    let scores = x.gather_rows(&tiles)?.matmul(cls.transpose()?)?;
    Ok((cls, scores))
}

/// Attention matrices of every block and head, computed on the whole bag
/// with a `-inf` key mask on excluded tiles. Rows and columns are
/// `[CLS, tile 0, tile 1, ...]`.
pub fn attention_maps(model: &Backbone, bag: &Bag, mask: &PaddingMask) -> Result<Vec<Tensor>, BackboneError> {
    if model.config.archetype != super::Archetype::Transformer {
        return Ok(Vec::new());
    }
    if mask.included().is_empty() {
        return Err(BackboneError::AllExcluded);
    }
    let g = Graph::new();
    let p = model.bind(&g, false)?;
    let tokens = model.project(&g, &p, &bag.features)?;
    let key_mask: Vec<f64> = mask
        .excluded
        .iter()
        .map(|&e| if e { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    let mut maps = Vec::new();
    encode(&model.config, &p[2..p.len() - 2], tokens, Some(&key_mask), Some(&mut maps))?;
    Ok(maps)
}

/// Logits of the whole bag with excluded tiles hidden by the key mask
/// rather than removed. Only the CLS row is read, so excluded queries do not
/// matter.
#[cfg(test)]
pub(super) fn key_masked_logits(model: &Backbone, bag: &Bag, mask: &PaddingMask) -> Result<Vec<f64>, BackboneError> {
    let g = Graph::new();
    let p = model.bind(&g, false)?;
    let tokens = model.project(&g, &p, &bag.features)?;
    let key_mask: Vec<f64> = mask
        .excluded
        .iter()
        .map(|&e| if e { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    let (cls, _) = pool(&model.config, &p[2..p.len() - 2], tokens, Some(&key_mask))?;
    Ok(cls.matmul(p[p.len() - 2])?.add(p[p.len() - 1])?.value().into_data())
}
