//! Evaluation reports: JSON records, CSV tables, SVG curve plots and the
//! multi-seed merge.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::srp::{KCurve, RankingSource, ShiReport, SlideSummary};
use crate::stats::{mean_std, wilcoxon_signed_rank, WilcoxonResult};

/// One slide under one ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideRecord {
    pub id: String,
    pub ranking: RankingSource,
    pub label: usize,
    pub counts: Vec<usize>,
    /// Probability of the evaluated class at each count.
    pub p_true: Vec<f64>,
    pub summary: SlideSummary,
}

impl SlideRecord {
    pub fn new(curve: &KCurve, label: usize, summary: SlideSummary) -> Self {
        Self {
            id: curve.slide_id.clone(),
            ranking: curve.source,
            label,
            counts: curve.counts.clone(),
            p_true: curve.class_probs(label),
            summary,
        }
    }
}

/// A single dataset-level number, long format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub ranking: String,
    pub kappa: Option<f64>,
    pub metric: String,
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(ranking: impl Into<String>, kappa: Option<f64>, metric: &str, value: Option<f64>) -> Self {
        Self {
            ranking: ranking.into(),
            kappa,
            metric: metric.to_string(),
            value,
        }
    }
}

/// Mean evaluated-class probability at each count, over the slides whose
/// schedule contains that count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub ranking: String,
    pub counts: Vec<usize>,
    pub p_true: Vec<f64>,
}

pub fn mean_curve(ranking: &str, slides: &[&SlideRecord]) -> MeanCurve {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for s in slides {
        for (&k, &p) in s.counts.iter().zip(&s.p_true) {
            let e = acc.entry(k).or_insert((0.0, 0));
            e.0 += p;
            e.1 += 1;
        }
    }
    MeanCurve {
        ranking: ranking.to_string(),
        counts: acc.keys().copied().collect(),
        p_true: acc.values().map(|(sum, n)| sum / *n as f64).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub mode: String,
    /// Run configuration, echoed verbatim.
    pub config: serde_json::Value,
    /// Input file name to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub metrics: Vec<MetricRow>,
    pub curves: Vec<MeanCurve>,
    pub shi: Option<ShiReport>,
    pub wilcoxon: Option<WilcoxonResult>,
    pub slides: Vec<SlideRecord>,
}

impl Report {
    pub fn to_json(&self) -> serde_json::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn metric(&self, ranking: &str, kappa: Option<f64>, metric: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|m| m.ranking == ranking && m.kappa == kappa && m.metric == metric)
            .and_then(|m| m.value)
    }
}

/// Aggregated metric across reports; `std` is the sample deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub ranking: String,
    pub kappa: Option<f64>,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Reports with a value.
    pub n: usize,
}

type RowKey = (String, Option<u64>, String);

fn row_key(m: &MetricRow) -> RowKey {
    (m.ranking.clone(), m.kappa.map(f64::to_bits), m.metric.clone())
}

/// Rows keep first-seen order; missing values are skipped.
pub fn merge_metrics(reports: &[Report]) -> Vec<MergedRow> {
    let mut order: Vec<RowKey> = Vec::new();
    let mut values: BTreeMap<RowKey, (Option<f64>, Vec<f64>)> = BTreeMap::new();
    for r in reports {
        for m in &r.metrics {
            let key = row_key(m);
            let e = values.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (m.kappa, Vec::new())
            });
            e.1.extend(m.value);
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (kappa, vals) = &values[&key];
            let ms = mean_std(vals);
            MergedRow {
                ranking: key.0.clone(),
                kappa: *kappa,
                metric: key.2.clone(),
                mean: ms.map(|m| m.mean),
                std: ms.map(|m| m.std),
                n: vals.len(),
            }
        })
        .collect()
}

/// Single-report rows in merged form.
pub fn as_merged(report: &Report) -> Vec<MergedRow> {
    merge_metrics(std::slice::from_ref(report))
}

pub fn write_csv(rows: &[MergedRow], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Paired test of `metric` between two rankings, one pair per report.
pub fn paired_wilcoxon(reports: &[Report], metric: &str, kappa: Option<f64>, a: &str, b: &str) -> Option<WilcoxonResult> {
    let diffs: Vec<f64> = reports
        .iter()
        .filter_map(|r| Some(r.metric(a, kappa, metric)? - r.metric(b, kappa, metric)?))
        .collect();
    wilcoxon_signed_rank(&diffs).ok()
}

/// Seed-mean curve with a ±1 std band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedCurve {
    pub ranking: String,
    pub counts: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn merge_curves(reports: &[Report]) -> Vec<MergedCurve> {
    let mut order: Vec<String> = Vec::new();
    let mut by_ranking: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in reports {
        for c in &r.curves {
            if !by_ranking.contains_key(&c.ranking) {
                order.push(c.ranking.clone());
            }
            let e = by_ranking.entry(c.ranking.clone()).or_default();
            for (&k, &p) in c.counts.iter().zip(&c.p_true) {
                e.entry(k).or_default().push(p);
            }
        }
    }
    order
        .into_iter()
        .map(|ranking| {
            let points = &by_ranking[&ranking];
            let stats: Vec<_> = points.values().filter_map(|v| mean_std(v)).collect();
            MergedCurve {
                counts: points.keys().copied().collect(),
                mean: stats.iter().map(|s| s.mean).collect(),
                std: stats.iter().map(|s| s.std).collect(),
                ranking,
            }
        })
        .collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn dash_for(ranking: &str) -> &'static str {
    match ranking {
        "native" => "",
        "foci" => " stroke-dasharray=\"8 4\"",
        _ => " stroke-dasharray=\"2 3\"",
    }
}

/// Confidence against reveal count: one polyline per series, a shaded ±1
/// std band, and a dotted line at `kappa`.
pub fn render_svg(curves: &[MergedCurve], kappa: Option<f64>, title: &str) -> String {
    let k_max = curves
        .iter()
        .flat_map(|c| c.counts.iter().copied())
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let x = |k: f64| MARGIN + (k - 1.0) / (k_max - 1.0) * (WIDTH - 2.0 * MARGIN);
    let y = |p: f64| HEIGHT - MARGIN - p.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let (x0, x1, y0, y1) = (x(1.0), x(k_max), y(0.0), y(1.0));
    let _ = writeln!(
        s,
        "<path d=\"M{x0:.2} {y1:.2} L{x0:.2} {y0:.2} L{x1:.2} {y0:.2}\" stroke=\"black\" fill=\"none\"/>"
    );
    let _ = writeln!(s, "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">K</text>", WIDTH / 2.0, HEIGHT - 15.0);
    let _ = writeln!(s, "<text x=\"10\" y=\"{:.2}\" font-size=\"12\">p</text>", HEIGHT / 2.0);
    if let Some(k) = kappa {
        let yk = y(k);
        let _ = writeln!(
            s,
            "<line x1=\"{x0:.2}\" y1=\"{yk:.2}\" x2=\"{x1:.2}\" y2=\"{yk:.2}\" stroke=\"gray\" stroke-dasharray=\"1 3\"/>"
        );
    }
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let upper = c.counts.iter().zip(c.mean.iter().zip(&c.std)).map(|(&k, (m, sd))| (k, m + sd));
        let lower = c.counts.iter().zip(c.mean.iter().zip(&c.std)).rev().map(|(&k, (m, sd))| (k, m - sd));
        let band: Vec<String> = upper
            .chain(lower)
            .map(|(k, p)| format!("{:.2},{:.2}", x(k as f64), y(p)))
            .collect();
        let _ = writeln!(
            s,
            "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
            band.join(" ")
        );
        let line: Vec<String> = c
            .counts
            .iter()
            .zip(&c.mean)
            .map(|(&k, &p)| format!("{:.2},{:.2}", x(k as f64), y(p)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{}><title>{}</title></polyline>",
            line.join(" "),
            dash_for(&c.ranking),
            escape(&c.ranking)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            WIDTH - MARGIN - 60.0,
            MARGIN + 15.0 * i as f64,
            escape(&c.ranking)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(values: &[(&str, &str, Option<f64>)]) -> Report {
        Report {
            command: "evaluate".into(),
            mode: "srp".into(),
            config: serde_json::json!({}),
            inputs: BTreeMap::new(),
            metrics: values
                .iter()
                .map(|(r, m, v)| MetricRow::new(*r, Some(0.9), m, *v))
                .collect(),
            curves: vec![MeanCurve {
                ranking: "native".into(),
                counts: vec![1, 2, 3],
                p_true: vec![0.2, 0.5, 0.9],
            }],
            shi: None,
            wilcoxon: None,
            slides: vec![],
        }
    }

    #[test]
    fn three_seed_merge_is_mean_and_sample_std() {
        let rs: Vec<Report> = [1.0, 2.0, 3.0].iter().map(|&v| report(&[("foci", "reach", Some(v))])).collect();
        let m = merge_metrics(&rs);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].mean, Some(2.0));
        assert_eq!(m[0].std, Some(1.0));
        assert_eq!(m[0].n, 3);
    }

    #[test]
    fn merging_one_report_is_the_identity() {
        let r = report(&[("foci", "reach", Some(0.25)), ("native", "msk_cond", None)]);
        let merged = merge_metrics(std::slice::from_ref(&r));
        for (row, m) in merged.iter().zip(&r.metrics) {
            assert_eq!((row.ranking.as_str(), row.metric.as_str()), (m.ranking.as_str(), m.metric.as_str()));
            assert_eq!(row.mean, m.value);
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_csv(&as_merged(&r), &mut a).unwrap();
        write_csv(&merged, &mut b).unwrap();
        assert_eq!(a, b);
        let curves = merge_curves(std::slice::from_ref(&r));
        assert_eq!(curves[0].mean, r.curves[0].p_true);
        assert!(curves[0].std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn missing_values_do_not_count() {
        let rs = vec![
            report(&[("foci", "msk_cond", Some(4.0))]),
            report(&[("foci", "msk_cond", None)]),
        ];
        let m = merge_metrics(&rs);
        assert_eq!((m[0].mean, m[0].n), (Some(4.0), 1));
    }

    #[test]
    fn mean_curve_averages_per_count() {
        let rec = |counts: Vec<usize>, p: Vec<f64>| SlideRecord {
            id: "a".into(),
            ranking: RankingSource::Native,
            label: 1,
            counts,
            p_true: p,
            summary: SlideSummary {
                msk: None,
                reached: false,
                aukc: 0.0,
            },
        };
        let a = rec(vec![1, 2], vec![0.2, 0.4]);
        let b = rec(vec![1, 2, 3], vec![0.4, 0.6, 1.0]);
        let c = mean_curve("native", &[&a, &b]);
        assert_eq!(c.counts, vec![1, 2, 3]);
        assert!((c.p_true[0] - 0.3).abs() < 1e-15);
        assert!((c.p_true[1] - 0.5).abs() < 1e-15);
        assert_eq!(c.p_true[2], 1.0);
    }

    #[test]
    fn svg_is_well_formed_with_one_polyline_per_series() {
        let curves = vec![
            MergedCurve {
                ranking: "native".into(),
                counts: vec![1, 2, 4],
                mean: vec![0.1, 0.5, 0.8],
                std: vec![0.0, 0.1, 0.05],
            },
            MergedCurve {
                ranking: "foci".into(),
                counts: vec![1, 2, 4],
                mean: vec![0.3, 0.9, 0.95],
                std: vec![0.01, 0.02, 0.0],
            },
        ];
        let svg = render_svg(&curves, Some(0.9), "a < b & c");
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let polylines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("polyline")).collect();
        assert_eq!(polylines.len(), 2);
        assert!(polylines[1].attribute("stroke-dasharray").is_some());
        assert!(polylines[0].attribute("stroke-dasharray").is_none());
        let dotted = doc
            .descendants()
            .filter(|n| n.has_tag_name("line") && n.attribute("stroke-dasharray") == Some("1 3"))
            .count();
        assert_eq!(dotted, 1);
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polygon")).count(), 2);
    }

    #[test]
    fn paired_test_uses_one_pair_per_report() {
        let rs: Vec<Report> = (1..=9)
            .map(|i| {
                let d = if i == 1 { -1.0 } else { i as f64 };
                report(&[("native", "msk_cond", Some(10.0 + d)), ("foci", "msk_cond", Some(10.0))])
            })
            .collect();
        let w = paired_wilcoxon(&rs, "msk_cond", Some(0.9), "native", "foci").unwrap();
        assert_eq!(w.n, 9);
        assert!((w.p_two_sided - 0.0078125).abs() < 1e-12);
    }
}
