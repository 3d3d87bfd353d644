//! Sequential reveal evaluation and the metrics read off its curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{top_k_indices, Backbone, BackboneError};
use crate::bags::{adaptive_k, Bag};
use crate::selector::slide_hash;
use crate::stats::{roc_auc, StatsError};

pub const DEFAULT_K_MAX: usize = 256;
/// Reveal counts up to this value are all evaluated.
pub const DENSE_PREFIX: usize = 32;
pub const SHI_EPS: f64 = 1e-8;
pub const DELETION_GRID: [usize; 5] = [16, 32, 64, 128, 256];
pub const DELETION_NORM: f64 = 256.0;
pub const KAPPA_SWEEP: [f64; 4] = [0.7, 0.8, 0.9, 0.95];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SrpError {
    #[error("invalid reveal schedule: {0}")]
    InvalidSchedule(String),
    #[error("area needs at least two reveal steps, got {0}")]
    TooFewSteps(usize),
    #[error("ranking has {scores} scores for {tiles} tiles")]
    RankingLength { scores: usize, tiles: usize },
    #[error("predicted-class curves need two classes, got {0}")]
    NotBinary(usize),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Strictly increasing reveal counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealSchedule {
    pub counts: Vec<usize>,
}

impl RevealSchedule {
    /// Every count up to 32, then doublings, ending at `min(k_max, n)`.
    pub fn default_for(n_real: usize, k_max: usize) -> Self {
        let cap = k_max.min(n_real);
        let mut counts: Vec<usize> = (1..=DENSE_PREFIX.min(cap)).collect();
        let mut k = DENSE_PREFIX * 2;
        while k < cap {
            counts.push(k);
            k *= 2;
        }
        if counts.last().is_some_and(|&last| last < cap) {
            counts.push(cap);
        }
        Self { counts }
    }

    pub fn from_counts(counts: Vec<usize>, n_real: usize) -> Result<Self, SrpError> {
        if counts.is_empty() || counts[0] == 0 {
            return Err(SrpError::InvalidSchedule("counts must start at 1 or more".into()));
        }
        if counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SrpError::InvalidSchedule("counts must be strictly increasing".into()));
        }
        if *counts.last().expect("non-empty") > n_real {
            return Err(SrpError::InvalidSchedule(format!("counts exceed the {n_real} tiles")));
        }
        Ok(Self { counts })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingSource {
    Native,
    Foci,
    Random,
    Oracle,
}

impl RankingSource {
    pub fn name(self) -> &'static str {
        match self {
            RankingSource::Native => "native",
            RankingSource::Foci => "foci",
            RankingSource::Random => "random",
            RankingSource::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for RankingSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(RankingSource::Native),
            "foci" => Ok(RankingSource::Foci),
            "random" => Ok(RankingSource::Random),
            "oracle" => Ok(RankingSource::Oracle),
            _ => Err(format!("unknown ranking {s:?} (native, foci, random)")),
        }
    }
}

/// Class probabilities of the frozen model at each reveal count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KCurve {
    pub slide_id: String,
    pub n_real: usize,
    pub source: RankingSource,
    pub counts: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

impl KCurve {
    /// Reveal fractions `K / N`.
    pub fn rho(&self) -> Vec<f64> {
        self.counts.iter().map(|&k| k as f64 / self.n_real as f64).collect()
    }

    pub fn class_probs(&self, class: usize) -> Vec<f64> {
        self.probs.iter().map(|p| p[class]).collect()
    }

    /// The first `steps` points.
    pub fn prefix(&self, steps: usize) -> KCurve {
        KCurve {
            counts: self.counts[..steps].to_vec(),
            probs: self.probs[..steps].to_vec(),
            ..self.clone()
        }
    }
}

/// Tile indices by descending score, ties to the lower index.
pub fn reveal_order(scores: &[f64]) -> Vec<usize> {
    top_k_indices(scores, scores.len())
}

/// Masked forwards on the top `K` tiles for every `K` of the schedule.
pub fn reveal_curve(
    model: &Backbone,
    bag: &Bag,
    scores: &[f64],
    schedule: &RevealSchedule,
    source: RankingSource,
) -> Result<KCurve, SrpError> {
    if scores.len() != bag.n_real() {
        return Err(SrpError::RankingLength {
            scores: scores.len(),
            tiles: bag.n_real(),
        });
    }
    let order = reveal_order(scores);
    let mut probs = Vec::with_capacity(schedule.counts.len());
    for &k in &schedule.counts {
        // ascending index order keeps the full reveal bit-identical to the
        // plain forward
        let mut included = order[..k].to_vec();
        included.sort_unstable();
        probs.push(model.forward_subset(bag, &included, None)?.probs);
    }
    Ok(KCurve {
        slide_id: bag.id.clone(),
        n_real: bag.n_real(),
        source,
        counts: schedule.counts.clone(),
        probs,
    })
}

/// Reveal curves for many bags under the default schedule, in bag order.
pub fn reveal_curves(
    model: &Backbone,
    bags: &[&Bag],
    scores: &[Vec<f64>],
    k_max: usize,
    source: RankingSource,
) -> Result<Vec<KCurve>, SrpError> {
    bags.par_iter()
        .zip(scores.par_iter())
        .map(|(bag, s)| reveal_curve(model, bag, s, &RevealSchedule::default_for(bag.n_real(), k_max), source))
        .collect()
}

fn argmax(p: &[f64]) -> usize {
    (1..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
}

/// Smallest scheduled `K` at which the model predicts `y` with
/// `p_y ≥ κ`.
pub fn msk(curve: &KCurve, y: usize, kappa: f64) -> Option<usize> {
    curve
        .counts
        .iter()
        .zip(&curve.probs)
        .find(|(_, p)| argmax(p) == y && p[y] >= kappa)
        .map(|(&k, _)| k)
}

/// Trapezoidal area under `p(ρ)`, divided by the last reveal fraction.
pub fn aukc_points(rho: &[f64], p: &[f64]) -> Result<f64, SrpError> {
    if rho.len() < 2 || p.len() != rho.len() {
        return Err(SrpError::TooFewSteps(rho.len().min(p.len())));
    }
    let area: f64 = (0..rho.len() - 1)
        .map(|j| 0.5 * (p[j] + p[j + 1]) * (rho[j + 1] - rho[j]))
        .sum();
    Ok(area / rho[rho.len() - 1])
}

pub fn aukc(curve: &KCurve, y: usize) -> Result<f64, SrpError> {
    aukc_points(&curve.rho(), &curve.class_probs(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideSummary {
    pub msk: Option<usize>,
    pub reached: bool,
    pub aukc: f64,
}

pub fn summarize(curve: &KCurve, y: usize, kappa: f64) -> Result<SlideSummary, SrpError> {
    let m = msk(curve, y, kappa);
    Ok(SlideSummary {
        msk: m,
        reached: m.is_some(),
        aukc: aukc(curve, y)?,
    })
}

/// Fraction of slides that reach κ.
pub fn reach(summaries: &[SlideSummary]) -> f64 {
    if summaries.is_empty() {
        return 0.0;
    }
    summaries.iter().filter(|s| s.reached).count() as f64 / summaries.len() as f64
}

/// Mean MSK over the slides that reach κ.
pub fn msk_cond(summaries: &[SlideSummary]) -> Option<f64> {
    let reached: Vec<f64> = summaries.iter().filter_map(|s| s.msk).map(|k| k as f64).collect();
    (!reached.is_empty()).then(|| reached.iter().sum::<f64>() / reached.len() as f64)
}

pub fn mean_aukc(summaries: &[SlideSummary]) -> f64 {
    summaries.iter().map(|s| s.aukc).sum::<f64>() / summaries.len().max(1) as f64
}

/// `(base − foci) / (base + ε)`; undefined when either side never reaches κ.
pub fn shi(msk_cond_base: Option<f64>, msk_cond_foci: Option<f64>, eps: f64) -> Option<f64> {
    Some((msk_cond_base? - msk_cond_foci?) / (msk_cond_base? + eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiReport {
    pub msk_cond_base: Option<f64>,
    pub msk_cond_foci: Option<f64>,
    pub eps: f64,
    pub shi: Option<f64>,
}

impl ShiReport {
    pub fn new(msk_cond_base: Option<f64>, msk_cond_foci: Option<f64>) -> Self {
        Self {
            msk_cond_base,
            msk_cond_foci,
            eps: SHI_EPS,
            shi: shi(msk_cond_base, msk_cond_foci, SHI_EPS),
        }
    }
}

/// True-class probability drop after deleting the top-`K` tiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    pub grid: Vec<usize>,
    pub delta: Vec<f64>,
}

/// Grid points that would delete every tile are left out.
pub fn deletion_curve(model: &Backbone, bag: &Bag, scores: &[f64]) -> Result<DeletionCurve, SrpError> {
    if scores.len() != bag.n_real() {
        return Err(SrpError::RankingLength {
            scores: scores.len(),
            tiles: bag.n_real(),
        });
    }
    let y = bag.label;
    let p_full = model.full_forward(bag)?.probs[y];
    let order = reveal_order(scores);
    let grid: Vec<usize> = DELETION_GRID.iter().copied().filter(|&k| k < bag.n_real()).collect();
    if grid.len() < DELETION_GRID.len() {
        log::debug!("{}: deletion grid truncated at {} tiles", bag.id, bag.n_real());
    }
    let mut delta = Vec::with_capacity(grid.len());
    for &k in &grid {
        let mut kept = order[k..].to_vec();
        kept.sort_unstable();
        delta.push(p_full - model.forward_subset(bag, &kept, None)?.probs[y]);
    }
    Ok(DeletionCurve { grid, delta })
}

/// Trapezoids between consecutive grid points, divided by `norm`.
pub fn deletion_auc_points(grid: &[usize], delta: &[f64], norm: f64) -> f64 {
    (0..grid.len().saturating_sub(1))
        .map(|j| 0.5 * (delta[j] + delta[j + 1]) * (grid[j + 1] - grid[j]) as f64)
        .sum::<f64>()
        / norm
}

pub fn deletion_auc(curve: &DeletionCurve) -> f64 {
    deletion_auc_points(&curve.grid, &curve.delta, DELETION_NORM)
}

/// How many tiles the selected-only evaluation keeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KChoice {
    Fixed(usize),
    Adaptive { alpha: f64, k_min: usize },
}

impl KChoice {
    pub fn for_bag(&self, n_real: usize) -> usize {
        match *self {
            KChoice::Fixed(k) => k.min(n_real),
            KChoice::Adaptive { alpha, k_min } => adaptive_k(n_real, alpha, k_min).min(n_real),
        }
    }
}

/// Positive-class probability when each bag is restricted to its top-K
/// ranked tiles.
pub fn selected_only_scores(
    model: &Backbone,
    bags: &[&Bag],
    scores: &[Vec<f64>],
    k: KChoice,
) -> Result<Vec<f64>, SrpError> {
    bags.par_iter()
        .zip(scores.par_iter())
        .map(|(bag, s)| {
            if s.len() != bag.n_real() {
                return Err(SrpError::RankingLength {
                    scores: s.len(),
                    tiles: bag.n_real(),
                });
            }
            let mut top = top_k_indices(s, k.for_bag(bag.n_real()));
            top.sort_unstable();
            Ok(model.forward_subset(bag, &top, None)?.probs[1])
        })
        .collect()
}

pub fn selected_only_auc(model: &Backbone, bags: &[&Bag], scores: &[Vec<f64>], k: KChoice) -> Result<f64, SrpError> {
    let s = selected_only_scores(model, bags, scores, k)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    Ok(roc_auc(&s, &labels)?)
}

/// Control ranking from its own stream, keyed by seed and slide.
pub fn random_scores(seed: u64, slide_id: &str, n: usize) -> Vec<f64> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&slide_hash(slide_id).to_le_bytes());
    key[16..].copy_from_slice(b"random-ranking\0\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Planted evidence first, everything else after in index order.
pub fn oracle_scores(n: usize, evidence: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for &i in evidence {
        s[i] = 1.0;
    }
    s
}

/// Binary curve relabelled so that the true-label slot tracks the
/// full-bag prediction `y_hat`: for `y_hat ≠ y`, `p_ŷ(K) = 1 − p_y(K)`.
/// Metrics read at label `y` are then predicted-class metrics.
pub fn predicted_class_curve(curve: &KCurve, y_hat: usize, y: usize) -> Result<KCurve, SrpError> {
    let c = curve.probs.first().map_or(2, Vec::len);
    if c != 2 {
        return Err(SrpError::NotBinary(c));
    }
    let mut out = curve.clone();
    if y_hat != y {
        for p in out.probs.iter_mut() {
            p.swap(0, 1);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
