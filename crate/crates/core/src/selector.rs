//! The rationale-readout head over a frozen backbone: a per-tile scoring
//! MLP, the two gates and the keep/drop views they induce.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{load_checkpoint, save_checkpoint, top_k_indices, Backbone, BackboneError, CheckpointError};
use crate::bags::Bag;
use crate::engine::{EngineError, Graph, Tensor, Var};
use crate::optim::Param;

/// Noise value at which the soft gate reduces to `σ(a/T)`.
pub const EVAL_NOISE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectorError {
    #[error("gate noise must lie strictly inside (0, 1), got {0}")]
    NoiseEndpoint(f64),
    #[error("noise has {noise} entries for {tiles} tiles")]
    NoiseLength { noise: usize, tiles: usize },
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
    #[error("selector parameters do not fit width {h}: {reason}")]
    Layout { h: usize, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Two-layer MLP `h → h/2 → 1` with a tanh hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorHead {
    h: usize,
    params: Vec<Param>,
}

impl SelectorHead {
    fn template(h: usize) -> Vec<Param> {
        let hidden = (h / 2).max(1);
        vec![
            Param::weight("sel_w1", Tensor::zeros(h, hidden)),
            Param::bias("sel_b1", Tensor::zeros(1, hidden)),
            Param::weight("sel_w2", Tensor::zeros(hidden, 1)),
            Param::bias("sel_b2", Tensor::zeros(1, 1)),
        ]
    }

    pub fn init(h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7365_6c65_6374);
        let mut params = Self::template(h);
        for p in params.iter_mut().filter(|p| p.decay) {
            let (r, c) = (p.value.rows(), p.value.cols());
            let a = (6.0 / (r + c) as f64).sqrt();
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        }
        Self { h, params }
    }

    /// Rebuilds a head from raw tensors, e.g. a checkpoint section.
    pub fn from_tensors(h: usize, tensors: Vec<Tensor>) -> Result<Self, SelectorError> {
        let mut params = Self::template(h);
        if tensors.len() != params.len() {
            return Err(SelectorError::Layout {
                h,
                reason: format!("{} tensors, expected {}", tensors.len(), params.len()),
            });
        }
        for (p, t) in params.iter_mut().zip(tensors) {
            if t.shape() != p.value.shape() {
                return Err(SelectorError::Layout {
                    h,
                    reason: format!("{} has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape()),
                });
            }
            p.value = t;
        }
        Ok(Self { h, params })
    }

    pub fn width(&self) -> usize {
        self.h
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        crate::params_checksum(&self.params)
    }

    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Result<Vec<Var<'g>>, EngineError> {
        self.params.iter().map(|p| g.leaf(&p.value, trainable)).collect()
    }

    /// Selection logits `a`, `n × 1`, from an `n × h` token matrix.
    pub fn logits<'g>(&self, p: &[Var<'g>], tokens: Var<'g>) -> Result<Var<'g>, EngineError> {
        tokens.matmul(p[0])?.add(p[1])?.tanh()?.matmul(p[2])?.add(p[3])
    }

    /// One logit per token row.
    pub fn score_tiles(&self, tokens: &Tensor) -> Result<Vec<f64>, SelectorError> {
        let g = Graph::new();
        let p = self.bind(&g, false)?;
        let t = g.constant(tokens)?;
        Ok(self.logits(&p, t)?.value().into_data())
    }
}

/// The frozen token projection of every tile of `bag`.
pub fn frozen_tokens(model: &Backbone, bag: &Bag) -> Result<Tensor, BackboneError> {
    if bag.dim() != model.config.d {
        return Err(BackboneError::InputDim {
            found: bag.dim(),
            expected: model.config.d,
        });
    }
    let g = Graph::new();
    let p = model.bind(&g, false)?;
    Ok(model.project(&g, &p, &bag.features)?.value())
}

/// Selector logits for every tile of `bag`; the FOCI ranking score.
pub fn foci_scores(model: &Backbone, head: &SelectorHead, bag: &Bag) -> Result<Vec<f64>, SelectorError> {
    head.score_tiles(&frozen_tokens(model, bag)?)
}

/// Writes the backbone with the head in the `FSEL` section.
pub fn save_with_selector(path: &Path, model: &Backbone, head: &SelectorHead) -> Result<(), CheckpointError> {
    save_checkpoint(path, model, Some(head.params()))
}

/// Reads a backbone and, if present, its selector head.
pub fn load_with_selector(path: &Path) -> Result<(Backbone, Option<SelectorHead>), CheckpointError> {
    let (model, section) = load_checkpoint(path)?;
    let head = section
        .map(|ps| SelectorHead::from_tensors(model.config.h, ps.into_iter().map(|p| p.value).collect()))
        .transpose()
        .map_err(|e| CheckpointError::Layout(e.to_string()))?;
    Ok((model, head))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    #[serde(rename = "soft")]
    Soft,
    #[serde(rename = "ste")]
    HardTopK,
}

impl std::str::FromStr for GateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "soft" => Ok(GateMode::Soft),
            "ste" | "hard" => Ok(GateMode::HardTopK),
            _ => Err(format!("unknown gate {s:?} (soft, ste)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub mode: GateMode,
    /// Soft mode only.
    pub temperature: f64,
    /// Hard mode only.
    pub k: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            mode: GateMode::HardTopK,
            temperature: 0.5,
            k: 32,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        match self.mode {
            GateMode::Soft if !(self.temperature > 0.0 && self.temperature.is_finite()) => {
                Err(SelectorError::InvalidConfig("temperature must be positive".into()))
            }
            GateMode::HardTopK if self.k == 0 => Err(SelectorError::InvalidConfig("K must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// 64-bit FNV-1a.
pub fn slide_hash(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Uniform noise in the open interval `(0, 1)`, keyed by run seed, slide
/// and epoch.
pub fn gate_noise(seed: u64, slide_id: &str, epoch: usize, n: usize) -> Vec<f64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&slide_hash(slide_id).to_le_bytes());
    key[16..24].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[24..].copy_from_slice(b"gumbel\0\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..n)
        .map(|_| loop {
            // random::<f64>() never yields 1, so only 0 needs rejecting
            let u: f64 = rng.random();
            if u > 0.0 {
                break u;
            }
        })
        .collect()
}

/// `z = σ((a + log ε − log(1−ε)) / T)` for an `n × 1` logit column.
pub fn soft_gate<'g>(a: Var<'g>, temperature: f64, noise: &[f64]) -> Result<Var<'g>, SelectorError> {
    if noise.len() != a.rows() {
        return Err(SelectorError::NoiseLength {
            noise: noise.len(),
            tiles: a.rows(),
        });
    }
    if let Some(&bad) = noise.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(SelectorError::NoiseEndpoint(bad));
    }
    let g = a.graph();
    let logistic = g.constant_owned(Tensor::column_vector(noise.iter().map(|e| e.ln() - (1.0 - e).ln()).collect()))?;
    let t = g.constant_owned(Tensor::scalar(temperature))?;
    Ok(a.add(logistic)?.div(t)?.sigmoid()?)
}

/// Value-only soft gate.
pub fn soft_gate_values(a: &[f64], temperature: f64, noise: &[f64]) -> Result<Vec<f64>, SelectorError> {
    let g = Graph::new();
    let a = g.constant_owned(Tensor::column_vector(a.to_vec()))?;
    Ok(soft_gate(a, temperature, noise)?.value().into_data())
}

/// Hard top-K mask with its straight-through gate.
pub struct HardGate<'g> {
    /// Selected tiles, ascending.
    pub selected: Vec<usize>,
    /// `m ∈ {0, 1}^n`.
    pub mask: Vec<f64>,
    /// `m̃ = (σ(a) − stopgrad σ(a)) + m`, `n × 1`; its value is exactly `m`.
    pub m_tilde: Var<'g>,
}

/// Top-K of an `n × 1` logit column, ties to the lower index. `K > n` is
/// clamped to `n`.
pub fn hard_topk_gate<'g>(a: Var<'g>, k: usize) -> Result<HardGate<'g>, SelectorError> {
    let n = a.rows();
    if k > n {
        log::debug!("K = {k} exceeds the {n} tiles of this bag; clamped");
    }
    let values = a.value();
    let mut selected = top_k_indices(values.data(), k);
    selected.sort_unstable();
    let mut mask = vec![0.0; n];
    for &i in &selected {
        mask[i] = 1.0;
    }
    let g = a.graph();
    let s = a.sigmoid()?;
    // the zero term comes first so adding m leaves the value exactly m
    let m_tilde = s.sub(s.stop_grad())?.add(g.constant_owned(Tensor::column_vector(mask.clone()))?)?;
    Ok(HardGate {
        selected,
        mask,
        m_tilde,
    })
}

pub enum GateOutput<'g> {
    Soft { logits: Var<'g>, z: Var<'g> },
    Hard { logits: Var<'g>, gate: HardGate<'g> },
}

impl<'g> GateOutput<'g> {
    pub fn logits(&self) -> Var<'g> {
        match self {
            GateOutput::Soft { logits, .. } | GateOutput::Hard { logits, .. } => *logits,
        }
    }

    /// The differentiable per-tile weight: `z` or `m̃`.
    pub fn weights(&self) -> Var<'g> {
        match self {
            GateOutput::Soft { z, .. } => *z,
            GateOutput::Hard { gate, .. } => gate.m_tilde,
        }
    }
}

/// Gates `logits` under `config`; `noise` is only read in soft mode.
pub fn apply_gate<'g>(logits: Var<'g>, config: &GateConfig, noise: &[f64]) -> Result<GateOutput<'g>, SelectorError> {
    config.validate()?;
    Ok(match config.mode {
        GateMode::Soft => GateOutput::Soft {
            logits,
            z: soft_gate(logits, config.temperature, noise)?,
        },
        GateMode::HardTopK => GateOutput::Hard {
            logits,
            gate: hard_topk_gate(logits, config.k)?,
        },
    })
}

/// Tokens and weights of one view, over the tiles in `included`.
pub struct View<'g> {
    pub included: Vec<usize>,
    pub tokens: Var<'g>,
    pub weights: Option<Var<'g>>,
}

pub struct ThreeViews<'g> {
    pub full: View<'g>,
    pub keep: View<'g>,
    /// `None` when the hard mask selects every tile.
    pub drop: Option<View<'g>>,
}

/// Soft mode weights every tile by `z` (keep) and `1 − z` (drop). Hard mode
/// keeps the selected tiles weighted by `m̃` and drops them, keeping the
/// complement weighted by `1 − m̃`.
pub fn build_views<'g>(tokens: Var<'g>, gate: &GateOutput<'g>) -> Result<ThreeViews<'g>, SelectorError> {
    let n = tokens.rows();
    let all: Vec<usize> = (0..n).collect();
    let full = View {
        included: all.clone(),
        tokens,
        weights: None,
    };
    Ok(match gate {
        GateOutput::Soft { z, .. } => ThreeViews {
            full,
            keep: View {
                included: all.clone(),
                tokens,
                weights: Some(*z),
            },
            drop: Some(View {
                included: all,
                tokens,
                weights: Some(z.one_minus()?),
            }),
        },
        GateOutput::Hard { gate, .. } => {
            let complement: Vec<usize> = (0..n).filter(|&i| gate.mask[i] == 0.0).collect();
            let keep = View {
                tokens: tokens.gather_rows(&gate.selected)?,
                weights: Some(gate.m_tilde.gather_rows(&gate.selected)?),
                included: gate.selected.clone(),
            };
            let drop = if complement.is_empty() {
                log::debug!("hard mask covers all {n} tiles; drop view is empty");
                None
            } else {
                Some(View {
                    tokens: tokens.gather_rows(&complement)?,
                    weights: Some(gate.m_tilde.one_minus()?.gather_rows(&complement)?),
                    included: complement,
                })
            };
            ThreeViews { full, keep, drop }
        }
    })
}
