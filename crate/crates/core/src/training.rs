//! The selector objective and its training loop over a frozen backbone.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{top_k_indices, Backbone, BackboneError};
use crate::bags::{Bag, Dataset, Split};
use crate::engine::{cross_entropy, EngineError, Graph, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::selector::{apply_gate, build_views, frozen_tokens, gate_noise, GateConfig, GateMode, GateOutput, SelectorError, SelectorHead};

pub const ENTROPY_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the backbone must be frozen before selector training")]
    NotFrozen,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {term} loss at epoch {epoch}")]
    NonFiniteLoss { term: &'static str, epoch: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Suff,
    Hinge,
    Excl,
    Contig,
    Budget,
    Entropy,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Suff,
        LossTerm::Hinge,
        LossTerm::Excl,
        LossTerm::Contig,
        LossTerm::Budget,
        LossTerm::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Suff => "suff",
            LossTerm::Hinge => "hinge",
            LossTerm::Excl => "excl",
            LossTerm::Contig => "contig",
            LossTerm::Budget => "budget",
            LossTerm::Entropy => "entropy",
        }
    }
}

impl std::str::FromStr for LossTerm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown loss term {s:?} (suff, hinge, excl, contig, budget, entropy)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub suff: f64,
    pub hinge: f64,
    pub excl: f64,
    pub contig: f64,
    pub budget: f64,
    /// Soft mode only.
    pub entropy: f64,
    pub tau: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            suff: 0.5,
            hinge: 1.0,
            excl: 0.5,
            contig: 0.01,
            budget: 5e-3,
            entropy: 0.1,
            tau: 0.9,
            beta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Suff => self.suff,
            LossTerm::Hinge => self.hinge,
            LossTerm::Excl => self.excl,
            LossTerm::Contig => self.contig,
            LossTerm::Budget => self.budget,
            LossTerm::Entropy => self.entropy,
        }
    }

    pub fn set(&mut self, term: LossTerm, value: f64) {
        *match term {
            LossTerm::Suff => &mut self.suff,
            LossTerm::Hinge => &mut self.hinge,
            LossTerm::Excl => &mut self.excl,
            LossTerm::Contig => &mut self.contig,
            LossTerm::Budget => &mut self.budget,
            LossTerm::Entropy => &mut self.entropy,
        } = value;
    }

    /// Copy with one term switched off.
    pub fn ablate(mut self, term: LossTerm) -> Self {
        self.set(term, 0.0);
        self
    }

    /// Weights that actually enter the objective under `mode`.
    pub fn active(&self, mode: GateMode) -> Vec<(LossTerm, f64)> {
        LossTerm::ALL
            .into_iter()
            .filter(|&t| !(t == LossTerm::Entropy && mode == GateMode::HardTopK))
            .map(|t| (t, self.get(t)))
            .filter(|&(_, w)| w > 0.0)
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if LossTerm::ALL.iter().any(|&t| !(self.get(t) >= 0.0 && self.get(t).is_finite())) {
            return Err(TrainError::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0 && self.beta > 0.0 && self.beta < 1.0) {
            return Err(TrainError::InvalidConfig("tau and beta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-term loss values. `full` is the monitor and never enters the total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub full: f64,
    pub suff: f64,
    pub hinge: f64,
    pub excl: f64,
    pub contig: f64,
    pub budget: f64,
    pub entropy: f64,
    pub total_selector: f64,
}

impl LossBreakdown {
    pub fn term(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Suff => self.suff,
            LossTerm::Hinge => self.hinge,
            LossTerm::Excl => self.excl,
            LossTerm::Contig => self.contig,
            LossTerm::Budget => self.budget,
            LossTerm::Entropy => self.entropy,
        }
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        *match term {
            LossTerm::Suff => &mut self.suff,
            LossTerm::Hinge => &mut self.hinge,
            LossTerm::Excl => &mut self.excl,
            LossTerm::Contig => &mut self.contig,
            LossTerm::Budget => &mut self.budget,
            LossTerm::Entropy => &mut self.entropy,
        } = v;
    }

    /// `Σ λ_t · term_t` over the active terms, in declaration order.
    pub fn weighted_sum(&self, weights: &LossWeights, mode: GateMode) -> f64 {
        weights
            .active(mode)
            .into_iter()
            .fold(None, |acc: Option<f64>, (t, w)| Some(acc.map_or(w * self.term(t), |a| a + w * self.term(t))))
            .unwrap_or(0.0)
    }

    fn accumulate(&mut self, other: &LossBreakdown) {
        self.full += other.full;
        for t in LossTerm::ALL {
            self.set(t, self.term(t) + other.term(t));
        }
        self.total_selector += other.total_selector;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.full *= s;
        for t in LossTerm::ALL {
            self.set(t, self.term(t) * s);
        }
        self.total_selector *= s;
        self
    }
}

/// Cross-entropy of the keep-view logits.
pub fn loss_suff<'g>(keep_logits: Var<'g>, y: usize) -> Result<Var<'g>, EngineError> {
    cross_entropy(keep_logits, y)
}

/// `max(τ − p_y, 0)`.
pub fn loss_hinge<'g>(p_y: Var<'g>, tau: f64) -> Result<Var<'g>, EngineError> {
    p_y.neg()?.add_scalar(tau)?.hinge()
}

/// `max(p_y − β, 0)` on the drop view.
pub fn loss_excl<'g>(p_y: Var<'g>, beta: f64) -> Result<Var<'g>, EngineError> {
    p_y.add_scalar(-beta)?.hinge()
}

/// Weighted spatial spread `Σ z_i ‖c_i − μ‖² / Σ z_i` around the weighted
/// centroid. `None` when the weights sum to zero.
pub fn loss_contig<'g>(z: Var<'g>, coords: &Tensor) -> Result<Option<Var<'g>>, EngineError> {
    let total = z.sum()?;
    if !(total.item() > 0.0) {
        log::debug!("contiguity term skipped: selection weights sum to zero");
        return Ok(None);
    }
    let c = z.graph().constant(coords)?;
    let mu = z.transpose()?.matmul(c)?.div(total)?;
    let spread = c.sub(mu)?.square()?.sum_cols()?;
    Ok(Some(z.mul(spread)?.sum()?.div(total)?))
}

/// `Σ z_i` (soft) or `Σ m̃_i` (hard).
pub fn loss_budget<'g>(weights: Var<'g>) -> Result<Var<'g>, EngineError> {
    weights.sum()
}

/// Mean binary entropy of the gates, clamped away from 0 and 1.
pub fn loss_entropy<'g>(z: Var<'g>) -> Result<Var<'g>, EngineError> {
    let z = z.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)?;
    let q = z.one_minus()?;
    z.mul(z.ln()?)?.add(q.mul(q.ln()?)?)?.mean()?.neg()
}

fn true_class_prob<'g>(logits: Var<'g>, y: usize) -> Result<Var<'g>, EngineError> {
    logits.softmax()?.at(0, y)
}

/// The selector objective for one bag, built on an existing gate.
pub struct Objective<'g> {
    /// `None` when every active weight is zero.
    pub total: Option<Var<'g>>,
    pub breakdown: LossBreakdown,
}

fn checked<'g>(term: LossTerm, epoch: usize, v: Result<Var<'g>, EngineError>) -> Result<Var<'g>, TrainError> {
    match v {
        Ok(v) if v.item().is_finite() => Ok(v),
        Ok(_) | Err(EngineError::NonFinite { .. }) => Err(TrainError::NonFiniteLoss {
            term: term.name(),
            epoch,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Builds every term from the gate and the frozen model; `p` are the
/// backbone leaves and `tokens` its projection of the bag.
pub fn objective<'g>(
    model: &Backbone,
    p: &[Var<'g>],
    tokens: Var<'g>,
    gate: &GateOutput<'g>,
    coords: &Tensor,
    y: usize,
    weights: &LossWeights,
    epoch: usize,
) -> Result<Objective<'g>, TrainError> {
    let g = tokens.graph();
    let views = build_views(tokens, gate)?;
    let mut vars: Vec<(LossTerm, Var<'g>)> = Vec::with_capacity(6);

    let keep = model.aggregate(g, p, views.keep.tokens, views.keep.weights)?;
    vars.push((LossTerm::Suff, checked(LossTerm::Suff, epoch, loss_suff(keep.logits, y))?));
    let p_keep = true_class_prob(keep.logits, y)?;
    vars.push((LossTerm::Hinge, checked(LossTerm::Hinge, epoch, loss_hinge(p_keep, weights.tau))?));
    if let Some(drop) = views.drop {
        let out = model.aggregate(g, p, drop.tokens, drop.weights)?;
        let p_drop = true_class_prob(out.logits, y)?;
        vars.push((LossTerm::Excl, checked(LossTerm::Excl, epoch, loss_excl(p_drop, weights.beta))?));
    }
    let w = gate.weights();
    if let Some(c) = loss_contig(w, coords)? {
        vars.push((LossTerm::Contig, checked(LossTerm::Contig, epoch, Ok(c))?));
    }
    vars.push((LossTerm::Budget, checked(LossTerm::Budget, epoch, loss_budget(w))?));
    if let GateOutput::Soft { z, .. } = gate {
        vars.push((LossTerm::Entropy, checked(LossTerm::Entropy, epoch, loss_entropy(*z))?));
    }

    let mut breakdown = LossBreakdown::default();
    for (t, v) in &vars {
        breakdown.set(*t, v.item());
    }
    let mut total: Option<Var<'g>> = None;
    for (t, lambda) in weights.active(gate_mode(gate)) {
        if let Some(&(_, v)) = vars.iter().find(|(u, _)| *u == t) {
            let term = v.scale(lambda)?;
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    breakdown.total_selector = total.map_or(0.0, |v| v.item());
    if !breakdown.total_selector.is_finite() {
        return Err(TrainError::NonFiniteLoss { term: "total", epoch });
    }
    Ok(Objective { total, breakdown })
}

fn gate_mode(gate: &GateOutput<'_>) -> GateMode {
    match gate {
        GateOutput::Soft { .. } => GateMode::Soft,
        GateOutput::Hard { .. } => GateMode::HardTopK,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub lr_multiplier: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub gate: GateConfig,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_epochs: 5,
            base_lr: 1e-4,
            min_lr: 1e-5,
            lr_multiplier: 5.0,
            weight_decay: 0.3,
            batch_size: 2,
            gate: GateConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::InvalidConfig("warmup_epochs exceeds epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.lr_multiplier >= 0.0) {
            return Err(TrainError::InvalidConfig("learning rates must be non-negative".into()));
        }
        self.gate.validate()?;
        self.weights.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.base_lr,
            min: self.min_lr,
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
        }
    }

    /// Learning rate applied to the selector at `epoch`.
    pub fn selector_lr(&self, epoch: usize) -> f64 {
        self.lr_multiplier * self.schedule().at(epoch)
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Gate bookkeeping across every hard-mode training forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateAudit {
    pub hard_forwards: usize,
    /// Forwards where `Σ m ≠ min(K, N)`.
    pub sparsity_violations: usize,
    /// Largest `|value(m̃) − m|` seen.
    pub max_ste_deviation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorRun {
    pub head: SelectorHead,
    pub history: Vec<EpochLog>,
    pub audit: GateAudit,
}

struct Prepared<'a> {
    bag: &'a Bag,
    tokens: Tensor,
    full_ce: f64,
}

/// Trains `head` against the frozen `model` on the train split.
///
/// Bags are shuffled per epoch and grouped into batches; within a batch,
/// gradients accumulate in slide-id order. The backbone is only read.
pub fn train_selector(
    model: &Backbone,
    mut head: SelectorHead,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<SelectorRun, TrainError> {
    if !model.is_frozen() {
        return Err(TrainError::NotFrozen);
    }
    config.validate()?;
    let prepared: Vec<Prepared> = dataset
        .split(Split::Train)
        .into_iter()
        .map(|bag| {
            let full = model.full_forward(bag)?;
            Ok(Prepared {
                bag,
                tokens: frozen_tokens(model, bag)?,
                full_ce: -full.probs[bag.label].ln(),
            })
        })
        .collect::<Result<_, TrainError>>()?;

    let frozen_objective = config.weights.active(config.gate.mode).is_empty();
    if frozen_objective {
        log::info!("every loss weight is zero; the selector is left at its initialisation");
    }
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        head.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x666f_6369);
    let mut history = Vec::with_capacity(config.epochs);
    let mut audit = GateAudit::default();

    for epoch in 0..config.epochs {
        let lr = config.selector_lr(epoch);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let mut per_bag = vec![LossBreakdown::default(); prepared.len()];
        for batch in order.chunks(config.batch_size) {
            let mut batch = batch.to_vec();
            batch.sort_by(|&a, &b| prepared[a].bag.id.cmp(&prepared[b].bag.id));
            let mut grads: Vec<Tensor> = head
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect();
            for &i in &batch {
                let item = &prepared[i];
                let g = Graph::new();
                let mp = model.bind(&g, false)?;
                let hp = head.bind(&g, true)?;
                let tokens = g.constant(&item.tokens)?;
                let logits = head.logits(&hp, tokens)?;
                let noise = match config.gate.mode {
                    GateMode::Soft => gate_noise(config.seed, &item.bag.id, epoch, item.bag.n_real()),
                    GateMode::HardTopK => Vec::new(),
                };
                let gate = apply_gate(logits, &config.gate, &noise)?;
                if let GateOutput::Hard { gate: hard, .. } = &gate {
                    audit.hard_forwards += 1;
                    let picked: f64 = hard.mask.iter().sum();
                    if picked as usize != config.gate.k.min(item.bag.n_real()) {
                        audit.sparsity_violations += 1;
                    }
                    let dev = hard
                        .m_tilde
                        .value()
                        .data()
                        .iter()
                        .zip(&hard.mask)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    audit.max_ste_deviation = audit.max_ste_deviation.max(dev);
                }
                let obj = objective(model, &mp, tokens, &gate, &item.bag.coords, item.bag.label, &config.weights, epoch)?;
                per_bag[i] = obj.breakdown;
                per_bag[i].full = item.full_ce;
                if let Some(total) = obj.total {
                    let back = g.backward(total)?;
                    for (acc, &v) in grads.iter_mut().zip(&hp) {
                        if let Some(gr) = back.get(v) {
                            acc.add_assign(gr);
                        }
                    }
                }
            }
            if !frozen_objective {
                let scale = 1.0 / batch.len() as f64;
                for gr in grads.iter_mut() {
                    gr.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
                opt.step(head.params_mut(), &grads, lr);
            }
        }
        // fold in slide order so the means do not depend on the shuffle
        let mut sum = LossBreakdown::default();
        per_bag.iter().for_each(|b| sum.accumulate(b));
        let losses = sum.scaled(1.0 / prepared.len().max(1) as f64);
        log::debug!("selector epoch {epoch}: lr {lr:.2e}, total {:.4}", losses.total_selector);
        history.push(EpochLog { epoch, lr, losses });
    }
    Ok(SelectorRun { head, history, audit })
}

/// Writes one JSON object per epoch.
pub fn write_history_jsonl<T: Serialize>(w: &mut impl Write, history: &[T]) -> std::io::Result<()> {
    for rec in history {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Fraction of `evidence` among the `k` highest-scored tiles.
pub fn evidence_recall(scores: &[f64], evidence: &[usize], k: usize) -> Option<f64> {
    if evidence.is_empty() {
        return None;
    }
    let top = top_k_indices(scores, k);
    let hits = evidence.iter().filter(|e| top.contains(e)).count();
    Some(hits as f64 / evidence.len() as f64)
}

/// Expected recall of a uniformly random ranking: `min(k, n) / n`.
pub fn random_recall(n: usize, k: usize) -> f64 {
    k.min(n) as f64 / n as f64
}

#[cfg(test)]
mod tests;
