//! Bags of tile features, the planted-evidence generator, the L2-norm
//! pre-filter and the on-disk feature format.

mod io;
mod prefilter;
mod synth;

pub use io::{
    load_bags, load_splits, read_bags, save_bags, save_splits, write_bags, BAGS_FILE, EVIDENCE_FILE, FORMAT_VERSION, MAGIC,
    SPLITS_FILE,
};
pub use prefilter::{adaptive_k, prefilter_dataset, prefilter_order, prefilter_topnorm, remap_evidence};
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;

#[derive(Debug, Error)]
pub enum BagError {
    #[error("bad magic: expected FOCB")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file while reading {what}")]
    Truncated { what: &'static str },
    #[error("feature dimension mismatch: bag {id} has d={found}, dataset d={expected}")]
    DimMismatch { id: String, found: usize, expected: usize },
    #[error("invalid bag {id}: {reason}")]
    InvalidBag { id: String, reason: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid split manifest: {0}")]
    InvalidSplits(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One slide: `n_real × d` tile features, `n_real × 2` tile coordinates
/// and a slide-level label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub features: Tensor,
    pub coords: Tensor,
    pub label: usize,
}

impl Bag {
    pub fn new(id: impl Into<String>, features: Tensor, coords: Tensor, label: usize) -> Result<Self, BagError> {
        let id = id.into();
        let invalid = |reason: String| BagError::InvalidBag {
            id: id.clone(),
            reason,
        };
        if features.rows() == 0 {
            return Err(invalid("bag has no tiles".into()));
        }
        if coords.rows() != features.rows() || coords.cols() != 2 {
            return Err(invalid(format!(
                "coords shape {:?} does not match {} tiles",
                coords.shape(),
                features.rows()
            )));
        }
        Ok(Self {
            id,
            features,
            coords,
            label,
        })
    }

    /// Number of real (unpadded) tiles.
    pub fn n_real(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Per-tile L2 norms of the feature rows.
    pub fn feature_norms(&self) -> Vec<f64> {
        (0..self.n_real())
            .map(|i| self.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Copy of the bag restricted to `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Bag {
        Bag {
            id: self.id.clone(),
            features: self.features.gather_rows(indices),
            coords: self.coords.gather_rows(indices),
            label: self.label,
        }
    }
}

/// Train / validation / test membership by bag id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Checks that the three lists are pairwise disjoint and only reference
    /// known bag ids.
    pub fn validate<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<(), BagError> {
        let known: BTreeSet<&str> = ids.into_iter().collect();
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !known.contains(id.as_str()) {
                return Err(BagError::InvalidSplits(format!("unknown bag id {id}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(BagError::InvalidSplits(format!("bag {id} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, num_classes: usize, feature_dim: usize, splits: Splits) -> Result<Self, BagError> {
        for bag in &bags {
            if bag.dim() != feature_dim {
                return Err(BagError::DimMismatch {
                    id: bag.id.clone(),
                    found: bag.dim(),
                    expected: feature_dim,
                });
            }
            if bag.label >= num_classes {
                return Err(BagError::InvalidBag {
                    id: bag.id.clone(),
                    reason: format!("label {} >= {num_classes} classes", bag.label),
                });
            }
        }
        splits.validate(bags.iter().map(|b| b.id.as_str()))?;
        Ok(Self {
            bags,
            num_classes,
            feature_dim,
            splits,
        })
    }

    pub fn get(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id == id)
    }

    /// Bags of one split, in manifest order.
    pub fn split(&self, which: Split) -> Vec<&Bag> {
        let ids = match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        };
        let index: BTreeMap<&str, &Bag> = self.bags.iter().map(|b| (b.id.as_str(), b)).collect();
        ids.iter().filter_map(|id| index.get(id.as_str()).copied()).collect()
    }
}

/// Planted-evidence tile indices per bag id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceTruth {
    pub evidence: BTreeMap<String, Vec<usize>>,
}

impl EvidenceTruth {
    pub fn get(&self, id: &str) -> &[usize] {
        self.evidence.get(id).map_or(&[], Vec::as_slice)
    }
}
