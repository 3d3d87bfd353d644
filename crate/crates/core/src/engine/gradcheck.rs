use super::{EngineError, Graph, Tensor, Var};

/// Step used by the central-difference oracle.
pub const FD_STEP: f64 = 1e-5;

/// Hinge inputs closer to zero than this make a probe point suspect.
const KINK_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every leaf entry.
    pub max_rel_error: f64,
    /// True when some hinge input sat within `1e-4` of its kink; the caller
    /// should perturb the probe point and retry.
    pub near_kink: bool,
    pub entries_checked: usize,
}

/// Central difference of a scalar function of several tensors, one entry at
/// a time.
pub fn central_difference<E>(eval: E, inputs: &[Tensor], step: f64) -> Result<Vec<Tensor>, EngineError>
where
    E: Fn(&[Tensor]) -> Result<f64, EngineError>,
{
    let mut out = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(input.rows(), input.cols());
        for i in 0..input.len() {
            let original = probe[k].data()[i];
            probe[k].data_mut()[i] = original + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = original - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = original;
            grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar node from leaf vars created for each input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport, EngineError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, EngineError>,
{
    let g = Graph::new();
    let leaves = inputs
        .iter()
        .map(|t| g.param(t))
        .collect::<Result<Vec<_>, _>>()?;
    let root = f(&g, &leaves)?;
    let near_kink = g.min_hinge_margin().is_some_and(|m| m < KINK_MARGIN);
    if near_kink {
        log::warn!("grad_check probe sits near a hinge kink; perturb the probe point");
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |probe: &[Tensor]| -> Result<f64, EngineError> {
        let g = Graph::new();
        let vars = probe
            .iter()
            .map(|t| g.constant(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(f(&g, &vars)?.item())
    };
    let numeric = central_difference(eval, inputs, FD_STEP)?;

    let mut max_rel_error: f64 = 0.0;
    let mut entries_checked = 0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            max_rel_error = max_rel_error.max((av - nv).abs() / nv.abs().max(1.0));
            entries_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        near_kink,
        entries_checked,
    })
}
