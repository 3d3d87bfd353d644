use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bag, BagError, Dataset, EvidenceTruth, Splits};
use crate::engine::Tensor;

/// Planted-evidence generator settings.
///
/// Evidence of both classes also carries a shared offset of
/// `evidence_salience` on the second feature axis, so evidence tiles stand
/// out from background independent of class.
///
/// Coordinates are in tile widths: background tiles scatter uniformly over a
/// `sqrt(N) × sqrt(N)` square and the evidence of a bag sits inside a disk of
/// `spatial_cluster_radius` around a random centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_slides: usize,
    pub tiles_min: usize,
    pub tiles_max: usize,
    pub d: usize,
    pub num_classes: usize,
    pub evidence_min: usize,
    pub evidence_max: usize,
    pub evidence_separation: f64,
    pub evidence_salience: f64,
    pub noise_sigma: f64,
    pub spatial_cluster_radius: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_slides: 200,
            tiles_min: 64,
            tiles_max: 128,
            d: 32,
            num_classes: 2,
            evidence_min: 4,
            evidence_max: 8,
            evidence_separation: 10.0,
            evidence_salience: 3.0,
            noise_sigma: 1.0,
            spatial_cluster_radius: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), BagError> {
        let fail = |m: &str| Err(BagError::InvalidConfig(m.to_string()));
        if self.n_slides < 2 {
            return fail("n_slides must be at least 2");
        }
        if self.tiles_min == 0 || self.tiles_min > self.tiles_max {
            return fail("tiles range must satisfy 1 <= min <= max");
        }
        if self.d == 0 {
            return fail("d must be positive");
        }
        if self.num_classes != 2 {
            return fail("only two classes are supported");
        }
        if self.evidence_min == 0 || self.evidence_min > self.evidence_max {
            return fail("evidence range must satisfy 1 <= min <= max");
        }
        if self.evidence_max > self.tiles_min {
            return fail("evidence_max must not exceed tiles_min");
        }
        // zero separation is allowed: it is the indistinguishable-classes control
        if !(self.evidence_separation >= 0.0 && self.evidence_separation.is_finite()) {
            return fail("evidence_separation must be finite and non-negative");
        }
        if !(self.evidence_salience >= 0.0 && self.evidence_salience.is_finite()) {
            return fail("evidence_salience must be finite and non-negative");
        }
        if self.evidence_salience > 0.0 && self.d < 2 {
            return fail("evidence_salience needs d >= 2");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be positive");
        }
        if !(self.spatial_cluster_radius >= 0.0 && self.spatial_cluster_radius.is_finite()) {
            return fail("spatial_cluster_radius must be non-negative");
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic planted-evidence dataset with a shuffled 70/15/15 split.
///
/// Class `y` plants its evidence around `(2y - 1) * separation / 2` on the
/// first feature axis and `salience` on the second. Values are rounded to f32 so a saved dataset reloads
/// bit-identically.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(Dataset, EvidenceTruth), BagError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
    let d = config.d;

    let mut bags = Vec::with_capacity(config.n_slides);
    let mut evidence = BTreeMap::new();
    for s in 0..config.n_slides {
        let id = format!("slide_{s:04}");
        let label = s % config.num_classes;
        let n = rng.random_range(config.tiles_min..=config.tiles_max);
        let e = rng.random_range(config.evidence_min..=config.evidence_max);

        let mut features: Vec<f64> = (0..n * d).map(|_| noise.sample(&mut rng)).collect();
        let side = (n as f64).sqrt();
        let mut coords: Vec<f64> = (0..n * 2).map(|_| rng.random_range(0.0..side)).collect();

        let mut planted: Vec<usize> = rand::seq::index::sample(&mut rng, n, e).into_vec();
        planted.sort_unstable();
        let shift = (2.0 * label as f64 - 1.0) * config.evidence_separation / 2.0;
        let r = config.spatial_cluster_radius;
        let lo = r.min(side / 2.0);
        let centre = [rng.random_range(lo..=side - lo), rng.random_range(lo..=side - lo)];
        for &i in &planted {
            features[i * d] += shift;
            if config.evidence_salience > 0.0 {
                features[i * d + 1] += config.evidence_salience;
            }
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let radius = r * rng.random_range(0.0f64..1.0).sqrt();
            coords[i * 2] = centre[0] + radius * angle.cos();
            coords[i * 2 + 1] = centre[1] + radius * angle.sin();
        }
        features.iter_mut().chain(coords.iter_mut()).for_each(|v| *v = quantize(*v));

        let features = Tensor::new(n, d, features).expect("sized above");
        let coords = Tensor::new(n, 2, coords).expect("sized above");
        evidence.insert(id.clone(), planted);
        bags.push(Bag::new(id, features, coords, label)?);
    }

    let mut ids: Vec<String> = bags.iter().map(|b| b.id.clone()).collect();
    ids.shuffle(&mut rng);
    let n_train = (config.n_slides * 70).div_ceil(100);
    let n_val = (config.n_slides * 15) / 100;
    let test = ids.split_off((n_train + n_val).min(ids.len()));
    let val = ids.split_off(n_train.min(ids.len()));
    let splits = Splits { train: ids, val, test };

    let dataset = Dataset::new(bags, config.num_classes, d, splits)?;
    Ok((dataset, EvidenceTruth { evidence }))
}
