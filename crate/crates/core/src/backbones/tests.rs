use super::*;
use crate::bags::{Bag, Dataset, Splits};
use crate::engine::sigmoid;
use proptest::prelude::*;
use rand::Rng;

fn random_bag(seed: u64, n: usize, d: usize) -> Bag {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Tensor::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let coords = Tensor::new(n, 2, (0..n * 2).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap();
    Bag::new("b", features, coords, 1).unwrap()
}

fn small(archetype: Archetype) -> Backbone {
    let config = BackboneConfig {
        h: 8,
        heads: 2,
        k_pool: 3,
        ..BackboneConfig::new(archetype, 4, 2)
    };
    Backbone::init(config, 7)
}

fn tokens_of(model: &Backbone, bag: &Bag) -> Tensor {
    let g = Graph::new();
    let p = model.bind(&g, false).unwrap();
    model.project(&g, &p, &bag.features).unwrap().value()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Plain-loop `t · M` for a row `t`.
fn row_times(t: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols()).map(|j| (0..m.rows()).map(|k| t[k] * m.get(k, j)).sum()).collect()
}

#[test]
fn unit_weights_and_empty_mask_are_bit_exact() {
    let bag = random_bag(1, 9, 4);
    for a in Archetype::ALL {
        let m = small(a);
        let plain = m.full_forward(&bag).unwrap();
        let weighted = m.forward(&bag, &PaddingMask::none(9), Some(&[1.0; 9])).unwrap();
        assert_eq!(plain, weighted, "{a:?}");
        let s: f64 = plain.probs.iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn zero_attention_vector_pools_the_mean() {
    let bag = random_bag(2, 6, 4);
    let mut m = small(Archetype::AttentionPool);
    let att_w = m.params().iter().position(|p| p.name == "att_w").unwrap();
    m.params_mut().unwrap()[att_w].value = Tensor::zeros(8, 1);
    let included = [0, 2, 5];
    let out = m.forward(&bag, &PaddingMask::keep_only(6, &included), None).unwrap();
    assert!(out.scores.iter().all(|&s| s == 0.0));

    let t = tokens_of(&m, &bag);
    let mean: Vec<f64> = (0..8)
        .map(|j| included.iter().map(|&i| t.get(i, j)).sum::<f64>() / 3.0)
        .collect();
    let p = m.params();
    let logits = row_times(&mean, &p[p.len() - 2].value);
    for c in 0..2 {
        assert!((out.logits[c] - logits[c] - p[p.len() - 1].value.data()[c]).abs() < 1e-12);
    }
}

#[test]
fn duplicating_every_tile_keeps_attention_pool_probabilities() {
    let bag = random_bag(3, 5, 4);
    let doubled = bag.select(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    let m = small(Archetype::AttentionPool);
    let a = m.full_forward(&bag).unwrap().probs;
    let b = m.full_forward(&doubled).unwrap().probs;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn identical_tiles_share_native_scores() {
    let row = [0.3, -1.0, 0.5, 2.0];
    let features = Tensor::from_rows(&vec![row.to_vec(); 5]).unwrap();
    let bag = Bag::new("same", features, Tensor::zeros(5, 2), 0).unwrap();
    for a in Archetype::ALL {
        let s = small(a).native_ranking(&bag).unwrap();
        assert!(s.iter().all(|&v| v == s[0]), "{a:?}: {s:?}");
    }
}

#[test]
fn attention_scores_match_independent_formula() {
    let bag = random_bag(4, 7, 4);
    let m = small(Archetype::AttentionPool);
    let t = tokens_of(&m, &bag);
    let p = m.params();
    let (v, u, w) = (&p[2].value, &p[3].value, &p[4].value);
    let scores = m.native_ranking(&bag).unwrap();
    for i in 0..7 {
        let vt = row_times(t.row(i), v);
        let ut = row_times(t.row(i), u);
        let gated: Vec<f64> = vt.iter().zip(&ut).map(|(a, b)| a.tanh() * sigmoid(*b)).collect();
        assert!((scores[i] - dot(&gated, w.data())).abs() < 1e-12);
    }
}

#[test]
fn depth_zero_transformer_scores_against_the_cls_init() {
    let config = BackboneConfig {
        h: 8,
        heads: 2,
        layers: 0,
        ..BackboneConfig::new(Archetype::Transformer, 4, 2)
    };
    let m = Backbone::init(config, 3);
    let bag = random_bag(5, 6, 4);
    let t = tokens_of(&m, &bag);
    let cls = m.params().iter().find(|p| p.name == "cls_token").unwrap().value.clone();
    let scores = m.native_ranking(&bag).unwrap();
    for i in 0..6 {
        assert!((scores[i] - dot(t.row(i), cls.data())).abs() < 1e-12);
    }
}

#[test]
fn attention_pool_exclusion_equals_zero_weight() {
    let bag = random_bag(6, 8, 4);
    let m = small(Archetype::AttentionPool);
    let excluded = PaddingMask::keep_only(8, &[0, 1, 3, 4, 6, 7]);
    let hard = m.forward(&bag, &excluded, None).unwrap();
    let mut w = vec![1.0; 8];
    w[2] = 0.0;
    w[5] = 0.0;
    let soft = m.forward(&bag, &PaddingMask::none(8), Some(&w)).unwrap();
    for (a, b) in hard.logits.iter().zip(&soft.logits) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn transformer_excluded_keys_get_no_attention() {
    let bag = random_bag(7, 6, 4);
    let m = small(Archetype::Transformer);
    let mask = PaddingMask::keep_only(6, &[1, 2, 4]);
    let maps = attention_maps(&m, &bag, &mask).unwrap();
    assert_eq!(maps.len(), m.config.layers * m.config.heads);
    for att in &maps {
        for r in 0..att.rows() {
            for tile in [0, 3, 5] {
                assert_eq!(att.get(r, tile + 1), 0.0);
            }
        }
    }
    let masked = transformer::key_masked_logits(&m, &bag, &mask).unwrap();
    let removed = m.forward(&bag, &mask, None).unwrap().logits;
    for (a, b) in masked.iter().zip(&removed) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn hard_topk_pools_exactly_k_tiles() {
    let bag = random_bag(8, 9, 4);
    let m = small(Archetype::HardTopK);
    let out = m.full_forward(&bag).unwrap();
    let top = hard_topk::top_k_indices(&out.scores, 3);
    assert_eq!(top.len(), 3);
    let t = tokens_of(&m, &bag);
    let mean: Vec<f64> = (0..8).map(|j| top.iter().map(|&i| t.get(i, j)).sum::<f64>() / 3.0).collect();
    let p = m.params();
    let logits = row_times(&mean, &p[p.len() - 2].value);
    for c in 0..2 {
        assert!((out.logits[c] - logits[c] - p[p.len() - 1].value.data()[c]).abs() < 1e-12);
    }
    // with two included tiles only two are pooled
    let two = m.forward(&bag, &PaddingMask::keep_only(9, &[4, 6]), None).unwrap();
    assert_eq!(two.scores.len(), 2);
}

#[test]
fn all_excluded_is_rejected() {
    let bag = random_bag(9, 3, 4);
    let m = small(Archetype::AttentionPool);
    let mask = PaddingMask {
        excluded: vec![true; 3],
    };
    assert_eq!(m.forward(&bag, &mask, None).unwrap_err(), BackboneError::AllExcluded);
    assert!(matches!(
        m.forward(&bag, &PaddingMask::none(2), None),
        Err(BackboneError::MaskLength { .. })
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for a in Archetype::ALL {
        let mut m = small(a);
        m.freeze();
        let sel = vec![crate::optim::Param::weight("w", Tensor::row_vector(vec![0.1, f64::MIN_POSITIVE]))];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, Some(&sel)).unwrap();
        let (back, selector) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
        assert_eq!(selector.unwrap()[0].value, sel[0].value);

        let mut plain = Vec::new();
        write_checkpoint(&mut plain, &m, None).unwrap();
        assert!(read_checkpoint(&mut plain.as_slice()).unwrap().1.is_none());
        plain[1] = b'X';
        assert!(matches!(read_checkpoint(&mut plain.as_slice()), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            read_checkpoint(&mut &buf[..buf.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }
}

fn tiny_dataset(seed: u64) -> Dataset {
    let bags: Vec<Bag> = (0..6)
        .map(|i| {
            let mut b = random_bag(seed + i, 5, 4);
            b.id = format!("s{i}");
            b.label = (i % 2) as usize;
            b
        })
        .collect();
    let splits = Splits {
        train: vec!["s0".into(), "s1".into(), "s2".into(), "s3".into()],
        val: vec!["s4".into(), "s5".into()],
        test: vec![],
    };
    Dataset::new(bags, 2, 4, splits).unwrap()
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let ds = tiny_dataset(20);
    for a in Archetype::ALL {
        let m = small(a);
        let config = BackboneTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (trained, history) = train_backbone(m.clone(), &ds, &config).unwrap();
        assert!(history.is_empty());
        assert_eq!(trained.params(), m.params());
        assert!(trained.is_frozen());
    }
}

#[test]
fn training_is_deterministic_and_freezes() {
    let ds = tiny_dataset(30);
    let config = BackboneTrainConfig {
        epochs: 2,
        lr: 1e-2,
        ..Default::default()
    };
    for a in Archetype::ALL {
        let (m1, h1) = train_backbone(small(a), &ds, &config).unwrap();
        let (mut m2, h2) = train_backbone(small(a), &ds, &config).unwrap();
        assert_eq!(m1.checksum(), m2.checksum());
        assert_eq!(h1, h2);
        assert_ne!(m1.checksum(), small(a).checksum());
        assert_eq!(m2.params_mut().unwrap_err(), BackboneError::Frozen);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tile_order_does_not_change_logits(seed in 0u64..1000, n in 2usize..10, rot in 1usize..9) {
        let bag = random_bag(seed, n, 4);
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted = bag.select(&perm);
        for a in Archetype::ALL {
            let m = small(a);
            let x = m.full_forward(&bag).unwrap().logits;
            let y = m.full_forward(&permuted).unwrap().logits;
            for (p, q) in x.iter().zip(&y) {
                prop_assert!((p - q).abs() < 1e-10, "{:?}", a);
            }
        }
    }
}
