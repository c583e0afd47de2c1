use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{EmbeddingHead, ForwardCache, HeadGrads};
use super::loss::{triplet_loss, EmbeddedTriplet};
use super::EmbeddingError;
use crate::annotation::TestAnswer;
use crate::data::{FeatureStore, SampleId, Split};

/// Hyperparameters for fine-tuning the head on answered tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by
    /// `decay`. `None` decays once at two thirds of training.
    pub milestones: Option<Vec<usize>>,
    /// Answered tests per optimizer step.
    pub batch_size: usize,
    /// Defaults to the feature dimension.
    pub hidden: Option<usize>,
    /// Defaults to the hidden width.
    pub output: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.4,
            lr: 0.001,
            epochs: 15,
            momentum: 0.9,
            decay: 0.1,
            milestones: None,
            batch_size: 32,
            hidden: None,
            output: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |m: &str| Err(EmbeddingError::InvalidConfig(m.to_owned()));
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad("margin must be positive");
        }
        // A zero step size is allowed: it leaves the head at initialization.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.hidden == Some(0) || self.output == Some(0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.milestones
            .clone()
            .unwrap_or_else(|| vec![(2 * self.epochs).div_ceil(3)])
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: EmbeddingHead,
    /// Mean per-test loss over all answers before the first step.
    pub initial_loss: f64,
    /// Mean per-test loss over all answers after the last step.
    pub final_loss: f64,
    /// Mean per-test loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Sample indices of one answered test.
struct Prepared {
    negative: usize,
    positive1: usize,
    positive2: usize,
}

fn prepare(store: &FeatureStore, answers: &[TestAnswer]) -> Result<Vec<Prepared>, EmbeddingError> {
    let index: HashMap<&SampleId, usize> = store
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (&s.id, i))
        .collect();
    let lookup = |id: &SampleId| -> Result<usize, EmbeddingError> {
        let &i = index
            .get(id)
            .ok_or_else(|| EmbeddingError::UnknownSample(id.to_string()))?;
        if store.samples()[i].split != Split::Base {
            return Err(EmbeddingError::NotBase(id.to_string()));
        }
        Ok(i)
    };
    answers
        .iter()
        .map(|a| {
            let (p1, p2) = a.positives();
            Ok(Prepared {
                negative: lookup(a.negative())?,
                positive1: lookup(p1)?,
                positive2: lookup(p2)?,
            })
        })
        .collect()
}

/// One optimizer step's loss and gradient. Forward passes are shared
/// between tests that reuse a sample.
fn batch_step(
    head: &EmbeddingHead,
    store: &FeatureStore,
    batch: &[&Prepared],
    margin: f64,
    grads: &mut HeadGrads,
) -> Result<f64, EmbeddingError> {
    let samples = store.samples();
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let mut slots: Vec<(ForwardCache, Vec<f64>)> = Vec::new();
    let mut keys = Vec::with_capacity(batch.len());
    for t in batch {
        let mut k = [0usize; 3];
        for (dst, idx) in k.iter_mut().zip([t.negative, t.positive1, t.positive2]) {
            *dst = match slot_of.get(&idx) {
                Some(&s) => s,
                None => {
                    let cache = head.forward(&samples[idx].features)?;
                    let dim = cache.embedding.len();
                    slots.push((cache, vec![0.0; dim]));
                    slot_of.insert(idx, slots.len() - 1);
                    slots.len() - 1
                }
            };
        }
        keys.push(k);
    }

    let mut loss = 0.0;
    for [kn, k1, k2] in keys {
        let z = |k: usize| slots[k].0.embedding.as_slice().expect("contiguous");
        let (l, g) = triplet_loss(
            EmbeddedTriplet {
                negative: z(kn),
                positive1: z(k1),
                positive2: z(k2),
            },
            margin,
        );
        loss += l;
        for (k, gk) in [(kn, g.negative), (k1, g.positive1), (k2, g.positive2)] {
            for (a, b) in slots[k].1.iter_mut().zip(gk) {
                *a += b;
            }
        }
    }
    for (cache, g) in &slots {
        head.backward(cache, g, grads);
    }
    Ok(loss)
}

fn mean_loss(
    head: &EmbeddingHead,
    store: &FeatureStore,
    data: &[Prepared],
    margin: f64,
) -> Result<f64, EmbeddingError> {
    let samples = store.samples();
    let embed = |i: usize| head.embed(&samples[i].features);
    let mut total = 0.0;
    for t in data {
        let (l, _) = triplet_loss(
            EmbeddedTriplet {
                negative: &embed(t.negative)?,
                positive1: &embed(t.positive1)?,
                positive2: &embed(t.positive2)?,
            },
            margin,
        );
        total += l;
    }
    Ok(total / data.len() as f64)
}

/// Mean per-test dual-triplet loss of `head` over `answers`.
pub fn average_loss(
    head: &EmbeddingHead,
    store: &FeatureStore,
    answers: &[TestAnswer],
    margin: f64,
) -> Result<f64, EmbeddingError> {
    if answers.is_empty() {
        return Err(EmbeddingError::NoAnswers);
    }
    mean_loss(head, store, &prepare(store, answers)?, margin)
}

/// The head `train_srn` starts from, for an input of dimension `dim`.
pub fn initial_head(dim: usize, cfg: &TrainConfig) -> EmbeddingHead {
    init_with(dim, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn init_with(dim: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> EmbeddingHead {
    let hidden = cfg.hidden.unwrap_or(dim);
    let output = cfg.output.unwrap_or(hidden);
    EmbeddingHead::init(dim, hidden, output, rng)
}

/// Fine-tunes a freshly initialized head on answered tests with
/// mini-batch SGD with momentum on the summed dual-triplet loss.
pub fn train_srn(
    store: &FeatureStore,
    answers: &[TestAnswer],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, EmbeddingError> {
    cfg.validate()?;
    if answers.is_empty() {
        return Err(EmbeddingError::NoAnswers);
    }
    let data = prepare(store, answers)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = init_with(store.dim(), cfg, &mut rng);
    let initial_loss = mean_loss(&head, store, &data, cfg.margin)?;

    let mut grads = HeadGrads::zeros_like(&head);
    let mut velocity = HeadGrads::zeros_like(&head);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            grads.fill_zero();
            epoch_loss += batch_step(&head, store, &batch, cfg.margin, &mut grads)?;

            let mu = cfg.momentum;
            velocity.w1.zip_mut_with(&grads.w1, |v, &g| *v = mu * *v + g);
            velocity.b1.zip_mut_with(&grads.b1, |v, &g| *v = mu * *v + g);
            velocity.w2.zip_mut_with(&grads.w2, |v, &g| *v = mu * *v + g);
            velocity.b2.zip_mut_with(&grads.b2, |v, &g| *v = mu * *v + g);
            head.w1.scaled_add(-lr, &velocity.w1);
            head.b1.scaled_add(-lr, &velocity.b1);
            head.w2.scaled_add(-lr, &velocity.w2);
            head.b2.scaled_add(-lr, &velocity.b2);
        }
        if head.params().iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        epoch_losses.push(epoch_loss / data.len() as f64);
    }

    let final_loss = mean_loss(&head, store, &data, cfg.margin)?;
    Ok(TrainOutcome {
        head,
        initial_loss,
        final_loss,
        epoch_losses,
    })
}
