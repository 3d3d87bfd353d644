use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use foci_core::backbones::{save_checkpoint, test_auc, train_backbone, Backbone, BackboneConfig, BackboneTrainConfig};
use foci_core::bags::{
    generate_synthetic, load_bags, prefilter_dataset, save_bags, Bag, Dataset, EvidenceTruth, Split, SynthConfig,
    BAGS_FILE, EVIDENCE_FILE, SPLITS_FILE,
};
use foci_core::experiment::{all_scores, run_experiment, ExperimentConfig, RunRecord};
use foci_core::report::{
    as_merged, mean_curve, merge_curves, merge_metrics, paired_wilcoxon, render_svg, write_csv, MetricRow, Report,
    SlideRecord,
};
use foci_core::selector::{load_with_selector, save_with_selector, GateConfig, SelectorHead};
use foci_core::srp::{
    deletion_auc, deletion_curve, predicted_class_curve, reveal_curves, selected_only_auc, summarize, KChoice, KCurve,
    RankingSource, ShiReport, SlideSummary, DELETION_GRID, KAPPA_SWEEP,
};
use foci_core::stats::{roc_auc, wilcoxon_signed_rank};
use foci_core::training::{train_selector, write_history_jsonl, LossTerm, LossWeights, TrainConfig};
use serde::Serialize;

use crate::args::{
    Cli, Command, EvalMode, EvaluateArgs, ExperimentArgs, GenArgs, ReportArgs, SplitArg, TrainBackboneArgs,
    TrainSelectorArgs,
};
use crate::error::CliError;

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::TrainBackbone(a) => train_backbone_cmd(&a),
        Command::TrainSelector(a) => train_selector_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report(a) => report(&a),
        Command::Experiment(a) => experiment(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Wall-clock time lives apart from the reports so they stay byte-stable.
fn write_meta(out: &Path, command: &str) -> Result<(), CliError> {
    write_json(
        &out.join("meta.json"),
        &serde_json::json!({
            "command": command,
            "generated_at": chrono::Utc::now().to_rfc3339(),
            "version": env!("CARGO_PKG_VERSION"),
        }),
    )
}

fn file_checksum(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(foci_core::sha256_hex(&bytes))
}

fn data_checksums(dir: &Path, into: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    for name in [BAGS_FILE, SPLITS_FILE, EVIDENCE_FILE] {
        let p = dir.join(name);
        if p.exists() {
            into.insert(name.to_string(), file_checksum(&p)?);
        }
    }
    Ok(())
}

fn load_data(dir: &Path, ncap: Option<usize>) -> Result<(Dataset, EvidenceTruth), CliError> {
    let (dataset, truth) = load_bags(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    match ncap {
        Some(0) => Err(CliError::Config("--ncap must be at least 1".into())),
        Some(cap) => Ok(prefilter_dataset(&dataset, &truth, cap)),
        None => Ok((dataset, truth)),
    }
}

fn create_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))
}

fn gen(a: &GenArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        n_slides: a.slides,
        tiles_min: a.tiles_min,
        tiles_max: a.tiles_max,
        d: a.d,
        num_classes: 2,
        evidence_min: a.evidence_min,
        evidence_max: a.evidence_max,
        evidence_separation: a.separation,
        evidence_salience: a.salience,
        noise_sigma: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    config.validate()?;
    let (dataset, truth) = generate_synthetic(&config)?;
    create_out(&a.out)?;
    save_bags(&a.out, &dataset, &truth)?;
    let mut outputs = BTreeMap::new();
    data_checksums(&a.out, &mut outputs)?;
    write_json(
        &a.out.join("gen.json"),
        &serde_json::json!({ "command": "gen", "config": config, "outputs": outputs }),
    )?;
    write_meta(&a.out, "gen")?;
    log::info!("wrote {} bags to {}", dataset.bags.len(), a.out.display());
    Ok(())
}

fn train_backbone_cmd(a: &TrainBackboneArgs) -> Result<(), CliError> {
    if a.hidden == 0 || !a.hidden.is_multiple_of(4) {
        return Err(CliError::Config("--hidden must be a positive multiple of 4".into()));
    }
    if !(a.lr.is_finite() && a.lr >= 0.0 && a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
        return Err(CliError::Config("--lr and --weight-decay must be finite and non-negative".into()));
    }
    let (dataset, _) = load_data(&a.data, a.ncap)?;
    let mut inputs = BTreeMap::new();
    data_checksums(&a.data, &mut inputs)?;
    let config = BackboneConfig {
        h: a.hidden,
        ..BackboneConfig::new(a.archetype, dataset.feature_dim, dataset.num_classes)
    };
    let train_config = BackboneTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        batch_size: 1,
        seed: a.seed,
    };
    let (model, history) = train_backbone(Backbone::init(config, a.seed), &dataset, &train_config)?;
    let auc = test_auc(&model, &dataset)?;
    create_out(&a.out)?;
    let ckpt = a.out.join("backbone.ckpt");
    save_checkpoint(&ckpt, &model, None)?;
    let mut w = BufWriter::new(File::create(a.out.join("history.jsonl"))?);
    write_history_jsonl(&mut w, &history)?;
    w.flush()?;
    write_json(
        &a.out.join("run.json"),
        &serde_json::json!({
            "command": "train-backbone",
            "config": a,
            "backbone": config,
            "train": train_config,
            "inputs": inputs,
            "backbone_checksum": model.checksum(),
            "checkpoint_sha256": file_checksum(&ckpt)?,
            "test_auc": auc,
        }),
    )?;
    write_meta(&a.out, "train-backbone")?;
    log::info!("{}: test auc {auc:?}", a.archetype.name());
    Ok(())
}

fn loss_weights(a: &TrainSelectorArgs) -> LossWeights {
    let mut w = LossWeights::default();
    let overrides = [
        (LossTerm::Suff, a.lambda_suff),
        (LossTerm::Hinge, a.lambda_hinge),
        (LossTerm::Excl, a.lambda_excl),
        (LossTerm::Contig, a.lambda_contig),
        (LossTerm::Budget, a.lambda_budget),
        (LossTerm::Entropy, a.lambda_entropy),
    ];
    for (term, v) in overrides {
        if let Some(v) = v {
            w.set(term, v);
        }
    }
    for &term in &a.ablate {
        w = w.ablate(term);
    }
    w
}

fn full_logits(model: &Backbone, bags: &[&Bag]) -> Result<Vec<Vec<f64>>, CliError> {
    Ok(bags
        .iter()
        .map(|b| model.full_forward(b).map(|o| o.logits))
        .collect::<Result<_, _>>()?)
}

fn train_selector_cmd(a: &TrainSelectorArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        epochs: a.epochs,
        warmup_epochs: a.warmup_epochs,
        lr_multiplier: a.lr_multiplier,
        gate: GateConfig {
            mode: a.gate,
            temperature: a.temperature,
            k: a.k,
        },
        weights: loss_weights(a),
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let (dataset, _) = load_data(&a.data, a.ncap)?;
    let (mut model, _) = load_with_selector(&a.backbone)?;
    model.freeze();
    let mut inputs = BTreeMap::new();
    data_checksums(&a.data, &mut inputs)?;
    inputs.insert("backbone".into(), file_checksum(&a.backbone)?);

    let test = dataset.split(Split::Test);
    let checksum_before = model.checksum();
    let logits_before = full_logits(&model, &test)?;
    let head = SelectorHead::init(model.config.h, a.seed);
    let init_checksum = head.checksum();
    let run = train_selector(&model, head, &dataset, &config)?;
    let checksum_after = model.checksum();
    let preserved = checksum_after == checksum_before && full_logits(&model, &test)? == logits_before;

    create_out(&a.out)?;
    let ckpt = a.out.join("selector.ckpt");
    save_with_selector(&ckpt, &model, &run.head)?;
    let mut w = BufWriter::new(File::create(a.out.join("history.jsonl"))?);
    write_history_jsonl(&mut w, &run.history)?;
    w.flush()?;
    write_json(
        &a.out.join("run.json"),
        &serde_json::json!({
            "command": "train-selector",
            "config": a,
            "train": config,
            "inputs": inputs,
            "backbone_checksum_before": checksum_before,
            "backbone_checksum_after": checksum_after,
            "preserved": preserved,
            "init_checksum": init_checksum,
            "selector_checksum": run.head.checksum(),
            "checkpoint_sha256": file_checksum(&ckpt)?,
            "audit": run.audit,
        }),
    )?;
    write_meta(&a.out, "train-selector")?;
    if !preserved {
        return Err(CliError::Numerical("frozen backbone outputs changed during selector training".into()));
    }
    Ok(())
}

fn eval_bags(dataset: &Dataset, split: SplitArg) -> Vec<&Bag> {
    match split {
        SplitArg::Train => dataset.split(Split::Train),
        SplitArg::Val => dataset.split(Split::Val),
        SplitArg::Test => dataset.split(Split::Test),
        SplitArg::All => dataset.bags.iter().collect(),
    }
}

fn argmax(p: &[f64]) -> usize {
    (1..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best })
}

/// Curves and per-κ summaries of one ranking; with `predicted_class` the
/// curves are relabelled to the full-bag prediction first.
fn srp_rows(
    model: &Backbone,
    bags: &[&Bag],
    scores: &[Vec<f64>],
    ranking: RankingSource,
    a: &EvaluateArgs,
    kappas: &[f64],
) -> Result<(Vec<KCurve>, Vec<MetricRow>, Vec<Vec<SlideSummary>>), CliError> {
    let mut curves = reveal_curves(model, bags, scores, a.kmax, ranking)?;
    if a.predicted_class {
        for (c, b) in curves.iter_mut().zip(bags) {
            let y_hat = argmax(&model.full_forward(b)?.probs);
            *c = predicted_class_curve(c, y_hat, b.label)?;
        }
    }
    let mut rows = Vec::new();
    let mut per_kappa = Vec::new();
    for &kappa in kappas {
        let summaries = curves
            .iter()
            .zip(bags)
            .map(|(c, b)| summarize(c, b.label, kappa))
            .collect::<Result<Vec<_>, _>>()?;
        let agg = foci_core::experiment::SrpAggregate::from_summaries(ranking, kappa, &summaries);
        rows.push(MetricRow::new(ranking.name(), Some(kappa), "reach", Some(agg.reach)));
        rows.push(MetricRow::new(ranking.name(), Some(kappa), "msk_cond", agg.msk_cond));
        rows.push(MetricRow::new(ranking.name(), Some(kappa), "aukc", Some(agg.aukc)));
        per_kappa.push(summaries);
    }
    Ok((curves, rows, per_kappa))
}

fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    if !(a.kappa > 0.0 && a.kappa <= 1.0) {
        return Err(CliError::Config(format!("--kappa must be in (0, 1], got {}", a.kappa)));
    }
    if a.kmax == 0 {
        return Err(CliError::Config("--kmax must be at least 1".into()));
    }
    if a.k.is_some() && a.adaptive_k.is_some() {
        return Err(CliError::Config("--k and --adaptive-k are exclusive".into()));
    }
    if a.mode == EvalMode::Shi && a.ranking == a.baseline {
        return Err(CliError::Config("--mode shi compares --ranking against a different --baseline".into()));
    }
    let (dataset, truth) = load_data(&a.data, a.ncap)?;
    let (model, head) = load_with_selector(&a.checkpoint)?;
    let mut inputs = BTreeMap::new();
    data_checksums(&a.data, &mut inputs)?;
    inputs.insert("checkpoint".into(), file_checksum(&a.checkpoint)?);
    let bags = eval_bags(&dataset, a.split);
    if bags.is_empty() {
        return Err(CliError::Data("evaluation split is empty".into()));
    }
    let scores_of = |r: RankingSource| all_scores(&model, head.as_ref(), Some(&truth), &bags, r, a.seed);
    let kappas: Vec<f64> = if a.kappa_sweep { KAPPA_SWEEP.to_vec() } else { vec![a.kappa] };
    let primary = kappas.iter().position(|&k| k == a.kappa).unwrap_or(0);

    let mut report = Report {
        command: "evaluate".into(),
        mode: serde_json::to_value(a.mode)?.as_str().unwrap_or_default().to_string(),
        config: serde_json::to_value(a)?,
        inputs,
        metrics: Vec::new(),
        curves: Vec::new(),
        shi: None,
        wilcoxon: None,
        slides: Vec::new(),
    };

    match a.mode {
        EvalMode::Srp | EvalMode::Shi => {
            let rankings = if a.mode == EvalMode::Shi {
                vec![a.baseline, a.ranking]
            } else {
                vec![a.ranking]
            };
            let mut primary_summaries = Vec::new();
            for r in rankings {
                let scores = scores_of(r)?;
                let (curves, rows, per_kappa) = srp_rows(&model, &bags, &scores, r, a, &kappas)?;
                report.metrics.extend(rows);
                let records: Vec<SlideRecord> = curves
                    .iter()
                    .zip(&bags)
                    .zip(&per_kappa[primary])
                    .map(|((c, b), s)| SlideRecord::new(c, b.label, *s))
                    .collect();
                report.curves.push(mean_curve(r.name(), &records.iter().collect::<Vec<_>>()));
                report.slides.extend(records);
                primary_summaries.push(per_kappa[primary].clone());
            }
            if a.mode == EvalMode::Shi {
                let kappa = Some(kappas[primary]);
                let base = report.metric(a.baseline.name(), kappa, "msk_cond");
                let foci = report.metric(a.ranking.name(), kappa, "msk_cond");
                report.shi = Some(ShiReport::new(base, foci));
                let diffs: Vec<f64> = primary_summaries[0]
                    .iter()
                    .zip(&primary_summaries[1])
                    .filter_map(|(b, f)| Some(b.msk? as f64 - f.msk? as f64))
                    .collect();
                report.wilcoxon = wilcoxon_signed_rank(&diffs).ok();
            }
        }
        EvalMode::Deletion => {
            let scores = scores_of(a.ranking)?;
            let mut aucs = Vec::new();
            let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for (b, s) in bags.iter().zip(&scores) {
                let c = deletion_curve(&model, b, s)?;
                for (&k, &d) in c.grid.iter().zip(&c.delta) {
                    by_k.entry(k).or_default().push(d);
                }
                aucs.push(deletion_auc(&c));
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let name = a.ranking.name();
            report.metrics.push(MetricRow::new(name, None, "deletion_auc", Some(mean(&aucs))));
            for k in DELETION_GRID {
                let v = by_k.get(&k).map(|v| mean(v));
                report.metrics.push(MetricRow::new(name, None, &format!("delta_p@{k}"), v));
            }
        }
        EvalMode::SelectedOnly => {
            let choice = match (a.k, a.adaptive_k) {
                (_, Some(ad)) => KChoice::Adaptive {
                    alpha: ad.alpha,
                    k_min: ad.k_min,
                },
                (Some(0), _) => return Err(CliError::Config("--k must be at least 1".into())),
                (Some(k), None) => KChoice::Fixed(k),
                (None, None) => KChoice::Fixed(8),
            };
            let scores = scores_of(a.ranking)?;
            let auc = selected_only_auc(&model, &bags, &scores, choice)?;
            let full: Vec<f64> = bags
                .iter()
                .map(|b| model.full_forward(b).map(|o| o.probs[1]))
                .collect::<Result<_, _>>()?;
            let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
            report
                .metrics
                .push(MetricRow::new(a.ranking.name(), None, "selected_only_auc", Some(auc)));
            report
                .metrics
                .push(MetricRow::new("full", None, "auc", roc_auc(&full, &labels).ok()));
        }
    }

    create_out(&a.out)?;
    std::fs::write(a.out.join("report.json"), report.to_json()?)?;
    write_csv(&as_merged(&report), File::create(a.out.join("aggregates.csv"))?)?;
    if !report.curves.is_empty() {
        let curves = merge_curves(std::slice::from_ref(&report));
        std::fs::write(a.out.join("curves.svg"), render_svg(&curves, Some(kappas[primary]), "sequential reveal"))?;
    }
    write_meta(&a.out, "evaluate")?;
    Ok(())
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut reports = Vec::new();
    let mut inputs = BTreeMap::new();
    for p in &a.inputs {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        let r: Report =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        inputs.insert(p.display().to_string(), foci_core::sha256_hex(text.as_bytes()));
        reports.push(r);
    }
    let rows = merge_metrics(&reports);
    let curves = merge_curves(&reports);
    let kappa = reports.iter().flat_map(|r| r.metrics.iter()).find_map(|m| m.kappa);
    let wilcoxon = paired_wilcoxon(&reports, "msk_cond", kappa, "native", "foci");
    create_out(&a.out)?;
    write_csv(&rows, File::create(a.out.join("merged.csv"))?)?;
    if !curves.is_empty() {
        std::fs::write(a.out.join("curves.svg"), render_svg(&curves, kappa, "sequential reveal, seed mean"))?;
    }
    write_json(
        &a.out.join("merged.json"),
        &serde_json::json!({
            "command": "report",
            "inputs": inputs,
            "rows": rows,
            "curves": curves,
            "wilcoxon_msk_cond_native_vs_foci": wilcoxon,
        }),
    )?;
    write_meta(&a.out, "report")?;
    Ok(())
}

#[derive(Serialize)]
struct RunRow {
    archetype: &'static str,
    seed: u64,
    test_auc: Option<f64>,
    preserved: bool,
    recall_foci: f64,
    recall_random: f64,
    native_reach: f64,
    native_msk_cond: Option<f64>,
    foci_reach: f64,
    foci_msk_cond: Option<f64>,
    shi: Option<f64>,
    deletion_auc_native: f64,
    deletion_auc_foci: f64,
    selected_only_native: f64,
    selected_only_foci: f64,
}

impl From<&RunRecord> for RunRow {
    fn from(r: &RunRecord) -> Self {
        Self {
            archetype: r.archetype.name(),
            seed: r.seed,
            test_auc: r.test_auc,
            preserved: r.preserved,
            recall_foci: r.recall_foci,
            recall_random: r.recall_random,
            native_reach: r.native.reach,
            native_msk_cond: r.native.msk_cond,
            foci_reach: r.foci.reach,
            foci_msk_cond: r.foci.msk_cond,
            shi: r.shi,
            deletion_auc_native: r.deletion_auc_native,
            deletion_auc_foci: r.deletion_auc_foci,
            selected_only_native: r.selected_only_native,
            selected_only_foci: r.selected_only_foci,
        }
    }
}

fn experiment(a: &ExperimentArgs) -> Result<(), CliError> {
    if a.seeds.is_empty() || a.archetypes.is_empty() {
        return Err(CliError::Config("need at least one seed and one archetype".into()));
    }
    let mut config = ExperimentConfig {
        seeds: a.seeds.clone(),
        archetypes: a.archetypes.clone(),
        k_max: a.kmax,
        kappa: a.kappa,
        ablations: a.ablate.clone(),
        ..ExperimentConfig::default()
    };
    config.synth.n_slides = a.slides;
    if let Some(e) = a.backbone_epochs {
        config.backbone_train.epochs = e;
    }
    if let Some(e) = a.selector_epochs {
        config.selector.epochs = e;
        config.selector.warmup_epochs = config.selector.warmup_epochs.min(e);
    }
    config.selector.validate()?;
    let report = run_experiment(&config)?;
    create_out(&a.out)?;
    write_json(&a.out.join("experiment.json"), &report)?;
    let mut w = csv::Writer::from_path(a.out.join("runs.csv"))?;
    for r in &report.runs {
        w.serialize(RunRow::from(r))?;
    }
    w.flush()?;
    write_meta(&a.out, "experiment")?;
    Ok(())
}
