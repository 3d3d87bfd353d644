//! Frozen MIL classifiers: a gated attention pool, a CLS transformer and a
//! hard top-k pool.
//!
//! All three share the token projection `t = tanh(x W + b)`. A forward pass
//! sees only the included tiles: excluded rows are removed before
//! aggregation, which for the attention-based models is the same as giving
//! their keys a `-inf` logit. Optional soft weights scale the included
//! tokens before aggregation.

mod attention_pool;
mod checkpoint;
mod hard_topk;
mod train;
mod transformer;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use train::{test_auc, train_backbone, BackboneHistory, BackboneTrainConfig, EpochRecord};
pub use hard_topk::top_k_indices;
pub use transformer::attention_maps;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bags::Bag;
use crate::engine::{EngineError, Graph, Tensor, Var};
use crate::optim::Param;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("every tile is excluded")]
    AllExcluded,
    #[error("mask covers {mask} tiles but the bag has {tiles}")]
    MaskLength { mask: usize, tiles: usize },
    #[error("weights must lie in [0, 1] and match the included tiles")]
    BadWeights,
    #[error("model is frozen")]
    Frozen,
    #[error("feature dimension {found} does not match model input {expected}")]
    InputDim { found: usize, expected: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    AttentionPool,
    Transformer,
    #[serde(rename = "hard_topk")]
    HardTopK,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::AttentionPool, Archetype::Transformer, Archetype::HardTopK];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::AttentionPool => "attention_pool",
            Archetype::Transformer => "transformer",
            Archetype::HardTopK => "hard_topk",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Archetype::AttentionPool => 1,
            Archetype::Transformer => 2,
            Archetype::HardTopK => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

impl std::str::FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown archetype {s:?} (attention_pool, transformer, hard_topk)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub archetype: Archetype,
    pub d: usize,
    pub h: usize,
    pub num_classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub k_pool: usize,
}

impl BackboneConfig {
    pub fn new(archetype: Archetype, d: usize, num_classes: usize) -> Self {
        Self {
            archetype,
            d,
            h: 64,
            num_classes,
            layers: 2,
            heads: 4,
            k_pool: 8,
        }
    }
}

/// Per-tile exclusion flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingMask {
    pub excluded: Vec<bool>,
}

impl PaddingMask {
    pub fn none(n: usize) -> Self {
        Self {
            excluded: vec![false; n],
        }
    }

    /// Mask that includes exactly `indices`.
    pub fn keep_only(n: usize, indices: &[usize]) -> Self {
        let mut excluded = vec![true; n];
        for &i in indices {
            excluded[i] = false;
        }
        Self { excluded }
    }

    pub fn included(&self) -> Vec<usize> {
        (0..self.excluded.len()).filter(|&i| !self.excluded[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Native ranking score for each included tile, in included order.
    pub scores: Vec<f64>,
}

/// Graph-level result of aggregating a token matrix.
pub struct Aggregate<'g> {
    /// `1 × C`.
    pub logits: Var<'g>,
    /// `n × 1` native ranking scores.
    pub scores: Var<'g>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub config: BackboneConfig,
    params: Vec<Param>,
    frozen: bool,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    use rand::Rng;
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect()).expect("sized")
}

impl Backbone {
    /// Freshly initialised, trainable model.
    pub fn init(config: BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, c) = (config.d, config.h, config.num_classes);
        let mut params = vec![
            Param::weight("proj_w", glorot(&mut rng, d, h, 1.0)),
            Param::bias("proj_b", Tensor::zeros(1, h)),
        ];
        match config.archetype {
            Archetype::AttentionPool => attention_pool::init_params(&mut params, &config, &mut |r, c, gain| {
                glorot(&mut rng, r, c, gain)
            }),
            Archetype::Transformer => {
                transformer::init_params(&mut params, &config, &mut |r, c, gain| glorot(&mut rng, r, c, gain))
            }
            Archetype::HardTopK => {
                hard_topk::init_params(&mut params, &config, &mut |r, c, gain| glorot(&mut rng, r, c, gain))
            }
        }
        params.push(Param::weight("cls_w", glorot(&mut rng, h, c, 1.0)));
        params.push(Param::bias("cls_b", Tensor::zeros(1, c)));
        Self {
            config,
            params,
            frozen: false,
        }
    }

    pub(crate) fn from_parts(config: BackboneConfig, params: Vec<Param>, frozen: bool) -> Self {
        Self { config, params, frozen }
    }

    pub fn archetype(&self) -> Archetype {
        self.config.archetype
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut [Param], BackboneError> {
        if self.frozen {
            return Err(BackboneError::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Hex SHA-256 over every parameter value.
    pub fn checksum(&self) -> String {
        crate::params_checksum(&self.params)
    }

    /// Parameter leaves; constants when `trainable` is false.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Result<Vec<Var<'g>>, EngineError> {
        self.params.iter().map(|p| g.leaf(&p.value, trainable)).collect()
    }

    /// `tanh(X W + b)`.
    pub fn project<'g>(&self, g: &'g Graph, p: &[Var<'g>], features: &Tensor) -> Result<Var<'g>, EngineError> {
        let x = g.constant(features)?;
        x.matmul(p[0])?.add(p[1])?.tanh()
    }

    /// Logits and native scores from an `n × h` token matrix of included
    /// tiles. `weights`, when given, is `n × 1`.
    pub fn aggregate<'g>(
        &self,
        g: &'g Graph,
        p: &[Var<'g>],
        tokens: Var<'g>,
        weights: Option<Var<'g>>,
    ) -> Result<Aggregate<'g>, EngineError> {
        let tokens = match weights {
            Some(w) => tokens.mul(w)?,
            None => tokens,
        };
        let head = &p[2..p.len() - 2];
        let (pooled, scores) = match self.config.archetype {
            Archetype::AttentionPool => attention_pool::pool(head, tokens, weights)?,
            Archetype::Transformer => transformer::pool(&self.config, head, tokens, None)?,
            Archetype::HardTopK => hard_topk::pool(g, &self.config, head, tokens)?,
        };
        let logits = pooled.matmul(p[p.len() - 2])?.add(p[p.len() - 1])?;
        Ok(Aggregate { logits, scores })
    }

    fn check_input(&self, bag: &Bag) -> Result<(), BackboneError> {
        if bag.dim() != self.config.d {
            return Err(BackboneError::InputDim {
                found: bag.dim(),
                expected: self.config.d,
            });
        }
        Ok(())
    }

    /// Frozen forward on the included tiles of `bag`. `weights` has one
    /// entry per included tile.
    pub fn forward(&self, bag: &Bag, mask: &PaddingMask, weights: Option<&[f64]>) -> Result<BackboneOutput, BackboneError> {
        self.check_input(bag)?;
        if mask.excluded.len() != bag.n_real() {
            return Err(BackboneError::MaskLength {
                mask: mask.excluded.len(),
                tiles: bag.n_real(),
            });
        }
        let included = mask.included();
        self.forward_subset(bag, &included, weights)
    }

    /// Frozen forward restricted to `included` (original indices, any order).
    pub fn forward_subset(&self, bag: &Bag, included: &[usize], weights: Option<&[f64]>) -> Result<BackboneOutput, BackboneError> {
        self.check_input(bag)?;
        if included.is_empty() {
            return Err(BackboneError::AllExcluded);
        }
        if let Some(w) = weights {
            if w.len() != included.len() || w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(BackboneError::BadWeights);
            }
        }
        let g = Graph::new();
        let p = self.bind(&g, false)?;
        let features = if included.len() == bag.n_real() && included.iter().enumerate().all(|(i, &j)| i == j) {
            bag.features.clone()
        } else {
            bag.features.gather_rows(included)
        };
        let tokens = self.project(&g, &p, &features)?;
        let weights = weights
            .map(|w| g.constant_owned(Tensor::column_vector(w.to_vec())))
            .transpose()?;
        let out = self.aggregate(&g, &p, tokens, weights)?;
        let logits = out.logits.value().into_data();
        let probs = out.logits.softmax()?.value().into_data();
        Ok(BackboneOutput {
            logits,
            probs,
            scores: out.scores.value().into_data(),
        })
    }

    /// Unmasked, unweighted forward.
    pub fn full_forward(&self, bag: &Bag) -> Result<BackboneOutput, BackboneError> {
        self.forward(bag, &PaddingMask::none(bag.n_real()), None)
    }

    /// Native per-tile ranking score on the full bag; higher is revealed
    /// earlier.
    pub fn native_ranking(&self, bag: &Bag) -> Result<Vec<f64>, BackboneError> {
        Ok(self.full_forward(bag)?.scores)
    }
}

#[cfg(test)]
mod tests;
