use super::*;
use crate::backbones::{Archetype, BackboneConfig};
use crate::engine::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn tiny_model(archetype: Archetype) -> Backbone {
    let config = BackboneConfig {
        h: 8,
        heads: 2,
        k_pool: 2,
        ..BackboneConfig::new(archetype, 4, 2)
    };
    let mut m = Backbone::init(config, 21);
    m.freeze();
    m
}

fn random_bag(seed: u64, n: usize, label: usize) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Tensor::new(n, 4, (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let c = Tensor::new(n, 2, (0..n * 2).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap();
    Bag::new(format!("s{seed}"), f, c, label).unwrap()
}

fn curve_of(counts: Vec<usize>, py: Vec<f64>, n: usize) -> KCurve {
    KCurve {
        slide_id: "c".into(),
        n_real: n,
        source: RankingSource::Native,
        counts,
        probs: py.iter().map(|&p| vec![1.0 - p, p]).collect(),
    }
}

#[test]
fn default_schedules() {
    let s = RevealSchedule::default_for(100, 256).counts;
    assert_eq!(s[..32], (1..=32).collect::<Vec<_>>()[..]);
    assert_eq!(s[32..], [64, 100]);
    assert_eq!(RevealSchedule::default_for(300, 256).counts[32..], [64, 128, 256]);
    assert_eq!(RevealSchedule::default_for(10, 256).counts, (1..=10).collect::<Vec<_>>());
    assert_eq!(RevealSchedule::default_for(100, 32).counts, (1..=32).collect::<Vec<_>>());
    assert_eq!(RevealSchedule::default_for(64, 256).counts.last(), Some(&64));
    assert!(RevealSchedule::from_counts(vec![2, 2], 5).is_err());
    assert!(RevealSchedule::from_counts(vec![0, 2], 5).is_err());
    assert!(RevealSchedule::from_counts(vec![1, 6], 5).is_err());
    assert!(RevealSchedule::from_counts(vec![1, 5], 5).is_ok());
}

#[test]
fn full_reveal_matches_the_plain_forward() {
    for a in Archetype::ALL {
        let m = tiny_model(a);
        let bag = random_bag(3, 9, 1);
        let scores: Vec<f64> = (0..9).map(|i| ((i * 7) % 5) as f64).collect();
        let all = RevealSchedule::from_counts(vec![9], 9).unwrap();
        let c = reveal_curve(&m, &bag, &scores, &all, RankingSource::Native).unwrap();
        assert_eq!(c.probs[0], m.full_forward(&bag).unwrap().probs);

        let sched = RevealSchedule::default_for(9, 256);
        let up: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let down: Vec<f64> = up.iter().map(|v| -v).collect();
        let a_curve = reveal_curve(&m, &bag, &up, &sched, RankingSource::Native).unwrap();
        let b_curve = reveal_curve(&m, &bag, &down, &sched, RankingSource::Native).unwrap();
        assert_eq!(a_curve.probs.last(), b_curve.probs.last());
        assert_ne!(a_curve.probs[0], b_curve.probs[0]);
        for p in &a_curve.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn curves_are_prefix_consistent() {
    let m = tiny_model(Archetype::Transformer);
    let bag = random_bag(4, 12, 0);
    let scores = random_scores(1, &bag.id, 12);
    let long = RevealSchedule::default_for(12, 256);
    let full = reveal_curve(&m, &bag, &scores, &long, RankingSource::Random).unwrap();
    for steps in [1, 5, 12] {
        let short = RevealSchedule::from_counts(long.counts[..steps].to_vec(), 12).unwrap();
        let direct = reveal_curve(&m, &bag, &scores, &short, RankingSource::Random).unwrap();
        assert_eq!(full.prefix(steps), direct);
    }
}

#[test]
fn msk_examples() {
    let c = curve_of(vec![1, 2, 3], vec![0.5, 0.95, 0.97], 3);
    assert_eq!(msk(&c, 1, 0.9), Some(2));
    let low = curve_of(vec![1, 2], vec![0.3, 0.6], 2);
    assert_eq!(msk(&low, 1, 0.9), None);
    // joint condition: a confident-enough truth that is not the argmax
    let multi = KCurve {
        probs: vec![vec![0.46, 0.54, 0.0]],
        ..curve_of(vec![1], vec![0.0], 1)
    };
    assert_eq!(msk(&multi, 0, 0.4), None);
    assert_eq!(msk(&multi, 1, 0.4), Some(1));
}

#[test]
fn reach_and_conditional_mean() {
    let s = |m: Option<usize>| SlideSummary {
        msk: m,
        reached: m.is_some(),
        aukc: 0.5,
    };
    let all = [s(Some(1)), s(Some(3))];
    assert_eq!(reach(&all), 1.0);
    let mixed = [s(Some(2)), s(None), s(Some(4))];
    assert!((reach(&mixed) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(msk_cond(&mixed), Some(3.0));
    assert_eq!(msk_cond(&[s(None)]), None);
}

#[test]
fn aukc_examples() {
    // no segment from zero: a flat curve loses the first reveal step
    let flat = curve_of(vec![1, 3, 4, 9], vec![1.0; 4], 10);
    assert!((aukc(&flat, 1).unwrap() - 8.0 / 9.0).abs() < 1e-15);
    let from_zero_ish = curve_of(vec![1, 1000], vec![1.0; 2], 1000);
    assert!(aukc(&from_zero_ish, 1).unwrap() > 0.998);
    assert!((aukc_points(&[0.25, 0.5], &[0.6, 0.8]).unwrap() - 0.35).abs() < 1e-15);
    assert_eq!(aukc_points(&[0.5], &[0.6]), Err(SrpError::TooFewSteps(1)));
}

#[test]
fn shi_matches_the_published_arithmetic() {
    let cases = [(7.33, 3.21, 0.562), (6.08, 1.79, 0.705), (11.20, 27.35, -1.442)];
    for (base, foci, expected) in cases {
        let v = shi(Some(base), Some(foci), SHI_EPS).unwrap();
        assert!((v - expected).abs() < 1.5e-3, "{base} {foci}: {v}");
    }
    assert_eq!(shi(None, Some(2.0), SHI_EPS), None);
    let r = ShiReport::new(Some(4.0), Some(1.0));
    assert_eq!(r.shi, Some(3.0 / (4.0 + 1e-8)));
}

#[test]
fn deletion_auc_matches_printed_rows() {
    let grid = DELETION_GRID;
    let abmil = deletion_auc_points(&grid, &[0.023, 0.035, 0.057, 0.080, 0.116], DELETION_NORM);
    assert!((abmil - 0.0736).abs() <= 5e-4, "{abmil}");
    let clam = deletion_auc_points(&grid, &[0.010, 0.025, 0.039, 0.061, 0.089], DELETION_NORM);
    assert!((clam - 0.0551).abs() <= 5e-4, "{clam}");
    assert_eq!(deletion_auc_points(&grid, &[0.0; 5], DELETION_NORM), 0.0);
}

#[test]
fn deletion_curve_drops_grid_points_past_the_bag() {
    let m = tiny_model(Archetype::AttentionPool);
    let bag = random_bag(5, 40, 1);
    let scores = random_scores(3, &bag.id, 40);
    let c = deletion_curve(&m, &bag, &scores).unwrap();
    assert_eq!(c.grid, vec![16, 32]);
    let p_full = m.full_forward(&bag).unwrap().probs[1];
    let order = reveal_order(&scores);
    let mut kept = order[16..].to_vec();
    kept.sort_unstable();
    let p = m.forward_subset(&bag, &kept, None).unwrap().probs[1];
    assert_eq!(c.delta[0], p_full - p);
}

#[test]
fn selected_only_with_every_tile_is_full_bag_auc() {
    for a in Archetype::ALL {
        let m = tiny_model(a);
        let bags: Vec<Bag> = (0..8).map(|i| random_bag(10 + i, 6 + i as usize, (i % 2) as usize)).collect();
        let refs: Vec<&Bag> = bags.iter().collect();
        let scores: Vec<Vec<f64>> = bags.iter().map(|b| random_scores(7, &b.id, b.n_real())).collect();
        let full: Vec<f64> = bags.iter().map(|b| m.full_forward(b).unwrap().probs[1]).collect();
        let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
        let expected = roc_auc(&full, &labels).unwrap();
        assert_eq!(selected_only_auc(&m, &refs, &scores, KChoice::Fixed(100)).unwrap(), expected);
        let adaptive = KChoice::Adaptive { alpha: 1.0, k_min: 1 };
        assert_eq!(selected_only_auc(&m, &refs, &scores, adaptive).unwrap(), expected);
    }
}

#[test]
fn random_rankings_are_reproducible() {
    assert_eq!(random_scores(4, "a", 50), random_scores(4, "a", 50));
    assert_ne!(random_scores(4, "a", 50), random_scores(5, "a", 50));
    assert_ne!(random_scores(4, "a", 50), random_scores(4, "b", 50));
    assert_eq!(reveal_order(&oracle_scores(5, &[3, 1]))[..2], [1, 3]);
}

#[test]
fn predicted_class_relabels_misclassified_slides() {
    let c = curve_of(vec![1, 2], vec![0.3, 0.4], 4);
    assert_eq!(predicted_class_curve(&c, 1, 1).unwrap(), c);
    let flipped = predicted_class_curve(&c, 0, 1).unwrap();
    assert_eq!(flipped.class_probs(1), vec![0.7, 0.6]);
    let three = KCurve {
        probs: vec![vec![0.2, 0.3, 0.5]],
        ..curve_of(vec![1], vec![0.0], 1)
    };
    assert_eq!(predicted_class_curve(&three, 0, 1), Err(SrpError::NotBinary(3)));
}

/// Independent trapezoid: accumulate over `K` directly, then normalise.
fn aukc_brute(counts: &[usize], p: &[f64], n: usize) -> f64 {
    let mut area = 0.0;
    for j in 1..counts.len() {
        let width = (counts[j] - counts[j - 1]) as f64 / n as f64;
        area += width * (p[j] + p[j - 1]) / 2.0;
    }
    area * n as f64 / counts[counts.len() - 1] as f64
}

fn msk_brute(counts: &[usize], probs: &[Vec<f64>], y: usize, kappa: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, p) in probs.iter().enumerate() {
        let others_below = p.iter().enumerate().all(|(c, &v)| c == y || v < p[y]);
        let tie_to_y = p.iter().enumerate().all(|(c, &v)| c >= y || v < p[y]);
        let correct = others_below || (tie_to_y && p.iter().enumerate().all(|(c, &v)| v <= p[y] || c == y));
        if correct && p[y] >= kappa && best.is_none_or(|b| counts[j] < b) {
            best = Some(counts[j]);
        }
    }
    best
}

fn random_curve(rng: &mut ChaCha8Rng) -> (KCurve, usize) {
    let n = rng.random_range(2..300);
    let mut counts: Vec<usize> = RevealSchedule::default_for(n, 256).counts;
    if counts.len() < 2 {
        counts = vec![1, 2];
    }
    let c = rng.random_range(2..4);
    let probs = counts
        .iter()
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0f64..1.0).powi(3)).collect();
            let s: f64 = raw.iter().sum::<f64>().max(1e-9);
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    let y = rng.random_range(0..c);
    (
        KCurve {
            slide_id: "r".into(),
            n_real: n.max(2),
            source: RankingSource::Random,
            counts,
            probs,
        },
        y,
    )
}

#[test]
fn metrics_match_brute_force_on_random_curves() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (curve, y) = random_curve(&mut rng);
        let base = aukc(&curve, y).unwrap();
        assert!((0.0..=1.0).contains(&base));
        let brute = aukc_brute(&curve.counts, &curve.class_probs(y), curve.n_real);
        assert!((base - brute).abs() <= 1e-12);
        let mut aukcs = Vec::new();
        for kappa in KAPPA_SWEEP {
            let s = summarize(&curve, y, kappa).unwrap();
            assert_eq!(s.msk, msk_brute(&curve.counts, &curve.probs, y, kappa));
            aukcs.push(s.aukc);
        }
        assert!(aukcs.iter().all(|&a| a == aukcs[0]));
    }
}

proptest! {
    #[test]
    fn kept_sets_never_exceed_the_schedule(n in 1usize..400, k_max in 1usize..300) {
        let s = RevealSchedule::default_for(n, k_max);
        prop_assert!(RevealSchedule::from_counts(s.counts.clone(), n).is_ok());
        prop_assert_eq!(*s.counts.last().unwrap(), k_max.min(n));
    }
}
