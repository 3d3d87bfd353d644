use super::{Bag, Dataset, EvidenceTruth};

/// Original indices kept by the top-norm pre-filter, in kept order.
///
/// Bags already within the cap keep their original order. Otherwise rows are
/// ordered by descending L2 norm, ties broken by ascending original index.
pub fn prefilter_order(bag: &Bag, n_cap: usize) -> Vec<usize> {
    let n = bag.n_real();
    if n <= n_cap {
        return (0..n).collect();
    }
    let norms = bag.feature_norms();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(n_cap);
    order
}

/// Keeps at most `n_cap` tiles, those with the largest feature L2 norm.
pub fn prefilter_topnorm(bag: &Bag, n_cap: usize) -> Bag {
    assert!(n_cap >= 1, "n_cap must be at least 1");
    if bag.n_real() <= n_cap {
        return bag.clone();
    }
    bag.select(&prefilter_order(bag, n_cap))
}

/// Maps evidence indices through a kept-index list; dropped tiles vanish.
pub fn remap_evidence(evidence: &[usize], kept: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(_, orig)| evidence.contains(orig))
        .map(|(new, _)| new)
        .collect();
    out.sort_unstable();
    out
}

/// Applies the pre-filter to every bag and remaps the planted evidence.
pub fn prefilter_dataset(dataset: &Dataset, truth: &EvidenceTruth, n_cap: usize) -> (Dataset, EvidenceTruth) {
    let mut bags = Vec::with_capacity(dataset.bags.len());
    let mut remapped = EvidenceTruth::default();
    for bag in &dataset.bags {
        let kept = prefilter_order(bag, n_cap);
        remapped
            .evidence
            .insert(bag.id.clone(), remap_evidence(truth.get(&bag.id), &kept));
        bags.push(if kept.len() == bag.n_real() && bag.n_real() <= n_cap {
            bag.clone()
        } else {
            bag.select(&kept)
        });
    }
    let filtered = Dataset {
        bags,
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        splits: dataset.splits.clone(),
    };
    (filtered, remapped)
}

/// `max(k_min, floor(alpha * n_real))`.
pub fn adaptive_k(n_real: usize, alpha: f64, k_min: usize) -> usize {
    assert!(alpha > 0.0 && alpha <= 1.0, "alpha must lie in (0, 1]");
    assert!(k_min >= 1, "k_min must be at least 1");
    k_min.max((alpha * n_real as f64).floor() as usize)
}
