use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backbone, BackboneError};
use crate::bags::{Bag, Dataset, Split};
use crate::engine::{cross_entropy, Graph, Tensor};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::stats::roc_auc;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

pub type BackboneHistory = Vec<EpochRecord>;

/// Positive-class probability of every bag, in order.
pub(crate) fn positive_scores(model: &Backbone, bags: &[&Bag]) -> Result<Vec<f64>, BackboneError> {
    bags.iter().map(|b| Ok(model.full_forward(b)?.probs[1])).collect()
}

fn split_auc(model: &Backbone, dataset: &Dataset, which: Split) -> Result<Option<f64>, BackboneError> {
    let bags = dataset.split(which);
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let scores = positive_scores(model, &bags)?;
    Ok(roc_auc(&scores, &labels).ok())
}

/// Full-bag cross-entropy training with AdamW at a constant rate; the model
/// comes back frozen.
pub fn train_backbone(
    mut model: Backbone,
    dataset: &Dataset,
    config: &BackboneTrainConfig,
) -> Result<(Backbone, BackboneHistory), BackboneError> {
    let schedule = LrSchedule::constant(config.lr);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..Default::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_636b);
    let train = dataset.split(Split::Train);
    let batch_size = config.batch_size.max(1);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(batch_size) {
            let mut grads: Vec<Tensor> = model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect();
            for &i in batch {
                let bag = train[i];
                let g = Graph::new();
                let p = model.bind(&g, true)?;
                let tokens = model.project(&g, &p, &bag.features)?;
                let out = model.aggregate(&g, &p, tokens, None)?;
                let loss = cross_entropy(out.logits, bag.label)?;
                if !loss.item().is_finite() {
                    return Err(BackboneError::NonFiniteLoss { step });
                }
                total += loss.item();
                let back = g.backward(loss)?;
                for (acc, &v) in grads.iter_mut().zip(&p) {
                    if let Some(gr) = back.get(v) {
                        acc.add_assign(gr);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for gr in grads.iter_mut() {
                gr.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(model.params_mut()?, &grads, schedule.at(epoch));
            step += 1;
        }
        let val_auc = split_auc(&model, dataset, Split::Val)?;
        log::debug!(
            "{} epoch {epoch}: loss {:.4}, val auc {:?}",
            model.archetype().name(),
            total / train.len().max(1) as f64,
            val_auc
        );
        history.push(EpochRecord {
            epoch,
            train_loss: total / train.len().max(1) as f64,
            val_auc,
        });
    }
    model.freeze();
    Ok((model, history))
}

/// Test-split AUC of the positive-class probability.
pub fn test_auc(model: &Backbone, dataset: &Dataset) -> Result<Option<f64>, BackboneError> {
    split_auc(model, dataset, Split::Test)
}
