//! End-to-end synthetic headroom study: generate, pretrain, freeze, train
//! the selector, evaluate every ranking under the reveal protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{test_auc, train_backbone, Archetype, Backbone, BackboneConfig, BackboneError, BackboneTrainConfig};
use crate::bags::{generate_synthetic, Bag, BagError, Dataset, EvidenceTruth, Split, SynthConfig};
use crate::selector::{foci_scores, SelectorError, SelectorHead};
use crate::srp::{
    deletion_auc, deletion_curve, msk_cond, oracle_scores, random_scores, reach, reveal_curves, selected_only_auc,
    summarize, KChoice, RankingSource, SlideSummary, SrpError, SHI_EPS,
};
use crate::stats::mean_std;
use crate::training::{evidence_recall, train_selector, GateAudit, LossTerm, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Bags(#[from] BagError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Srp(#[from] SrpError),
    #[error("ranking {0} needs {1}")]
    MissingInput(&'static str, &'static str),
}

/// Per-tile scores of one ranking source. `head` is required for FOCI and
/// `truth` for the oracle.
pub fn ranking_scores(
    model: &Backbone,
    head: Option<&SelectorHead>,
    truth: Option<&EvidenceTruth>,
    bag: &Bag,
    source: RankingSource,
    seed: u64,
) -> Result<Vec<f64>, ExperimentError> {
    Ok(match source {
        RankingSource::Native => model.native_ranking(bag)?,
        RankingSource::Foci => {
            let head = head.ok_or(ExperimentError::MissingInput("foci", "a selector head"))?;
            foci_scores(model, head, bag)?
        }
        RankingSource::Random => random_scores(seed, &bag.id, bag.n_real()),
        RankingSource::Oracle => {
            let truth = truth.ok_or(ExperimentError::MissingInput("oracle", "evidence truth"))?;
            oracle_scores(bag.n_real(), truth.get(&bag.id))
        }
    })
}

pub fn all_scores(
    model: &Backbone,
    head: Option<&SelectorHead>,
    truth: Option<&EvidenceTruth>,
    bags: &[&Bag],
    source: RankingSource,
    seed: u64,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    bags.par_iter()
        .map(|b| ranking_scores(model, head, truth, b, source, seed))
        .collect()
}

/// Dataset-level reveal metrics of one ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrpAggregate {
    pub ranking: RankingSource,
    pub kappa: f64,
    pub reach: f64,
    pub msk_cond: Option<f64>,
    pub aukc: f64,
    pub slides: usize,
}

impl SrpAggregate {
    pub fn from_summaries(ranking: RankingSource, kappa: f64, summaries: &[SlideSummary]) -> Self {
        Self {
            ranking,
            kappa,
            reach: reach(summaries),
            msk_cond: msk_cond(summaries),
            aukc: crate::srp::mean_aukc(summaries),
            slides: summaries.len(),
        }
    }
}

pub fn srp_aggregate(
    model: &Backbone,
    bags: &[&Bag],
    scores: &[Vec<f64>],
    ranking: RankingSource,
    k_max: usize,
    kappa: f64,
) -> Result<SrpAggregate, ExperimentError> {
    let curves = reveal_curves(model, bags, scores, k_max, ranking)?;
    let summaries = curves
        .iter()
        .zip(bags)
        .map(|(c, b)| summarize(c, b.label, kappa))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SrpAggregate::from_summaries(ranking, kappa, &summaries))
}

/// Mean deletion AUC over bags.
pub fn mean_deletion_auc(model: &Backbone, bags: &[&Bag], scores: &[Vec<f64>]) -> Result<f64, ExperimentError> {
    let aucs = bags
        .par_iter()
        .zip(scores.par_iter())
        .map(|(b, s)| Ok(deletion_auc(&deletion_curve(model, b, s)?)))
        .collect::<Result<Vec<f64>, SrpError>>()?;
    Ok(aucs.iter().sum::<f64>() / aucs.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub seeds: Vec<u64>,
    pub archetypes: Vec<Archetype>,
    pub backbone: BackboneConfig,
    pub backbone_train: BackboneTrainConfig,
    pub selector: TrainConfig,
    /// Reveal budget; 32 is the equal-budget setting.
    pub k_max: usize,
    pub kappa: f64,
    pub recall_k: usize,
    pub selected_only_k: usize,
    pub ablations: Vec<LossTerm>,
    pub ablation_archetypes: Vec<Archetype>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            seeds: vec![0, 1, 2],
            archetypes: Archetype::ALL.to_vec(),
            backbone: BackboneConfig::new(Archetype::AttentionPool, 32, 2),
            backbone_train: BackboneTrainConfig::default(),
            // about 60 optimizer steps per epoch here against hundreds at
            // full scale; the larger multiplier keeps the total update
            // comparable
            selector: TrainConfig {
                lr_multiplier: 50.0,
                ..TrainConfig::default()
            },
            k_max: 32,
            kappa: 0.9,
            recall_k: 32,
            selected_only_k: 8,
            ablations: vec![LossTerm::Suff, LossTerm::Excl],
            ablation_archetypes: vec![Archetype::Transformer],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub term: LossTerm,
    pub foci: SrpAggregate,
}

/// Everything measured for one (archetype, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub archetype: Archetype,
    pub seed: u64,
    pub test_auc: Option<f64>,
    pub backbone_checksum: String,
    pub selector_checksum: String,
    /// Test-bag full-bag logits bit-identical before and after selector
    /// training, and the parameter checksum unchanged.
    pub preserved: bool,
    pub audit: GateAudit,
    pub recall_foci: f64,
    pub recall_random: f64,
    pub native: SrpAggregate,
    pub foci: SrpAggregate,
    pub random: SrpAggregate,
    pub shi: Option<f64>,
    pub deletion_auc_native: f64,
    pub deletion_auc_foci: f64,
    pub selected_only_native: f64,
    pub selected_only_foci: f64,
    pub ablations: Vec<AblationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
}

fn full_logits(model: &Backbone, bags: &[&Bag]) -> Result<Vec<Vec<f64>>, BackboneError> {
    bags.iter().map(|b| model.full_forward(b).map(|o| o.logits)).collect()
}

fn mean_recall(bags: &[&Bag], scores: &[Vec<f64>], truth: &EvidenceTruth, k: usize) -> f64 {
    let r: Vec<f64> = bags
        .iter()
        .zip(scores)
        .filter_map(|(b, s)| evidence_recall(s, truth.get(&b.id), k))
        .collect();
    mean_std(&r).map_or(0.0, |m| m.mean)
}

/// One archetype on one generated dataset.
pub fn run_one(
    config: &ExperimentConfig,
    archetype: Archetype,
    seed: u64,
    dataset: &Dataset,
    truth: &EvidenceTruth,
) -> Result<RunRecord, ExperimentError> {
    let bb_config = BackboneConfig {
        archetype,
        d: dataset.feature_dim,
        num_classes: dataset.num_classes,
        ..config.backbone
    };
    let init = Backbone::init(bb_config, seed);
    let (model, _) = train_backbone(init, dataset, &BackboneTrainConfig { seed, ..config.backbone_train.clone() })?;
    let auc = test_auc(&model, dataset)?;
    let test = dataset.split(Split::Test);

    let checksum = model.checksum();
    let before = full_logits(&model, &test)?;
    let sel_config = TrainConfig { seed, ..config.selector };
    let head = SelectorHead::init(bb_config.h, seed);
    let run = train_selector(&model, head, dataset, &sel_config)?;
    let preserved = full_logits(&model, &test)? == before && model.checksum() == checksum;
    log::info!("{} seed {seed}: test auc {auc:?}, preserved {preserved}", archetype.name());

    let native_s = all_scores(&model, None, None, &test, RankingSource::Native, seed)?;
    let foci_s = all_scores(&model, Some(&run.head), None, &test, RankingSource::Foci, seed)?;
    let random_s = all_scores(&model, None, None, &test, RankingSource::Random, seed)?;
    let agg = |s: &[Vec<f64>], r| srp_aggregate(&model, &test, s, r, config.k_max, config.kappa);
    let native = agg(&native_s, RankingSource::Native)?;
    let foci = agg(&foci_s, RankingSource::Foci)?;
    let random = agg(&random_s, RankingSource::Random)?;
    let shi = crate::srp::shi(native.msk_cond, foci.msk_cond, SHI_EPS);
    let k_sel = KChoice::Fixed(config.selected_only_k);

    let mut ablations = Vec::new();
    if config.ablation_archetypes.contains(&archetype) {
        for &term in &config.ablations {
            let cfg = TrainConfig {
                weights: sel_config.weights.ablate(term),
                ..sel_config
            };
            let ab = train_selector(&model, SelectorHead::init(bb_config.h, seed), dataset, &cfg)?;
            let s = all_scores(&model, Some(&ab.head), None, &test, RankingSource::Foci, seed)?;
            let foci = agg(&s, RankingSource::Foci)?;
            log::info!("{} seed {seed}: ablate {} reach {:.3}", archetype.name(), term.name(), foci.reach);
            ablations.push(AblationRecord { term, foci });
        }
    }

    Ok(RunRecord {
        archetype,
        seed,
        test_auc: auc,
        backbone_checksum: checksum,
        selector_checksum: run.head.checksum(),
        preserved,
        audit: run.audit,
        recall_foci: mean_recall(&test, &foci_s, truth, config.recall_k),
        recall_random: mean_recall(&test, &random_s, truth, config.recall_k),
        native,
        foci,
        random,
        shi,
        deletion_auc_native: mean_deletion_auc(&model, &test, &native_s)?,
        deletion_auc_foci: mean_deletion_auc(&model, &test, &foci_s)?,
        selected_only_native: selected_only_auc(&model, &test, &native_s, k_sel)?,
        selected_only_foci: selected_only_auc(&model, &test, &foci_s, k_sel)?,
        ablations,
    })
}

/// Every archetype on a fresh dataset per seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let (dataset, truth) = generate_synthetic(&SynthConfig { seed, ..config.synth.clone() })?;
        for &a in &config.archetypes {
            runs.push(run_one(config, a, seed, &dataset, &truth)?);
        }
    }
    Ok(ExperimentReport {
        config: config.clone(),
        runs,
    })
}
