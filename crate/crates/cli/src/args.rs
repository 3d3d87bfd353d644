use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use foci_core::backbones::Archetype;
use foci_core::selector::GateMode;
use foci_core::srp::RankingSource;
use foci_core::training::LossTerm;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "foci", version, about = "Rationale selection and sequential-reveal audits for frozen MIL classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-evidence synthetic dataset.
    Gen(GenArgs),
    /// Pre-train and freeze a backbone.
    TrainBackbone(TrainBackboneArgs),
    /// Train a selector head over a frozen backbone.
    TrainSelector(TrainSelectorArgs),
    /// Reveal, deletion, selected-only or headroom evaluation.
    Evaluate(EvaluateArgs),
    /// Merge evaluation reports into tables and plots.
    Report(ReportArgs),
    /// Full synthetic headroom study over archetypes and seeds.
    Experiment(ExperimentArgs),
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed {p:?}: {e}")))
        .collect()
}

/// `alpha,kmin`
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdaptiveK {
    pub alpha: f64,
    pub k_min: usize,
}

fn parse_adaptive(s: &str) -> Result<AdaptiveK, String> {
    let (a, k) = s.split_once(',').ok_or("expected alpha,kmin")?;
    let alpha: f64 = a.trim().parse().map_err(|e| format!("bad alpha: {e}"))?;
    let k_min: usize = k.trim().parse().map_err(|e| format!("bad kmin: {e}"))?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(format!("alpha must be in (0, 1], got {alpha}"));
    }
    if k_min == 0 {
        return Err("kmin must be at least 1".into());
    }
    Ok(AdaptiveK { alpha, k_min })
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub slides: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub tiles_min: usize,
    #[arg(long, default_value_t = 128)]
    pub tiles_max: usize,
    #[arg(long, default_value_t = 4)]
    pub evidence_min: usize,
    #[arg(long, default_value_t = 8)]
    pub evidence_max: usize,
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 3.0)]
    pub salience: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainBackboneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "attention_pool")]
    pub archetype: Archetype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Keep at most this many tiles per bag, by feature norm.
    #[arg(long)]
    pub ncap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainSelectorArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long, default_value = "ste")]
    pub gate: GateMode,
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup_epochs: usize,
    #[arg(long, default_value_t = 5.0)]
    pub lr_multiplier: f64,
    /// Zero one loss term; repeatable.
    #[arg(long)]
    pub ablate: Vec<LossTerm>,
    #[arg(long)]
    pub lambda_suff: Option<f64>,
    #[arg(long)]
    pub lambda_hinge: Option<f64>,
    #[arg(long)]
    pub lambda_excl: Option<f64>,
    #[arg(long)]
    pub lambda_contig: Option<f64>,
    #[arg(long)]
    pub lambda_budget: Option<f64>,
    #[arg(long)]
    pub lambda_entropy: Option<f64>,
    #[arg(long)]
    pub ncap: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Srp,
    Deletion,
    SelectedOnly,
    Shi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Backbone checkpoint, with a selector section for the foci ranking.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "srp")]
    pub mode: EvalMode,
    #[arg(long, default_value = "native")]
    pub ranking: RankingSource,
    /// Baseline ranking for `--mode shi`.
    #[arg(long, default_value = "native")]
    pub baseline: RankingSource,
    #[arg(long, default_value_t = 0.9)]
    pub kappa: f64,
    /// Evaluate at κ ∈ {0.7, 0.8, 0.9, 0.95}.
    #[arg(long)]
    pub kappa_sweep: bool,
    #[arg(long, default_value_t = 256)]
    pub kmax: usize,
    #[arg(long)]
    pub ncap: Option<usize>,
    /// Fixed subset size for selected-only evaluation.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = parse_adaptive)]
    pub adaptive_k: Option<AdaptiveK>,
    #[arg(long)]
    pub predicted_class: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Seed of the random-ranking control.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// `report.json` files, one per seed.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    #[arg(long, value_parser = parse_seeds, default_value = "0,1,2")]
    pub seeds: std::vec::Vec<u64>,
    #[arg(long, default_value_t = 200)]
    pub slides: usize,
    #[arg(long, value_delimiter = ',', default_values = ["attention_pool", "transformer", "hard_topk"])]
    pub archetypes: Vec<Archetype>,
    #[arg(long, default_value_t = 32)]
    pub kmax: usize,
    #[arg(long, default_value_t = 0.9)]
    pub kappa: f64,
    /// Loss terms to ablate on the transformer archetype.
    #[arg(long, value_delimiter = ',', default_values = ["suff", "excl"])]
    pub ablate: Vec<LossTerm>,
    #[arg(long)]
    pub backbone_epochs: Option<usize>,
    #[arg(long)]
    pub selector_epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}
