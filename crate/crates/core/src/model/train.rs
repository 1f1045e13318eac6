use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::transformer::{Batch, Model};
use super::TrainConfig;
use crate::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::losses::EntropyLoss;
use crate::smoothing::TargetTable;

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, params: &[Array2<f64>]) -> Self {
        let zeros = || params.iter().map(|p| Array2::zeros(p.raw_dim())).collect::<Vec<_>>();
        Self {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.learning_rate, self.beta1, self.beta2, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean per-token training loss of each epoch, averaged over its batches.
    pub curve: Vec<f64>,
    pub steps: u64,
}

/// Train `model` in place. Batches are reshuffled every epoch from a
/// generator seeded with `config.seed`, which also drives dropout.
pub fn train(
    model: &mut Model,
    examples: &[TrainingExample],
    table: &TargetTable,
    loss: &dyn EntropyLoss,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, examples, table, loss, config, |_, _| Ok(()))
}

/// As [`train`], calling `on_epoch(epoch, loss)` after every epoch.
pub fn train_with(
    model: &mut Model,
    examples: &[TrainingExample],
    table: &TargetTable,
    loss: &dyn EntropyLoss,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("no training examples".into()));
    }
    if table.vocab_size() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "target table covers {} tokens, model vocabulary is {}",
            table.vocab_size(),
            model.config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(config, model.params.tensors());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (index, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Batch::from_examples(chunk.iter().map(|&i| &examples[i]));
            let (value, mut grads) = model
                .loss_and_gradients(&batch, table, loss, Some(&mut rng))
                .map_err(|e| match e {
                    Error::Numeric(msg) => {
                        Error::Numeric(format!("epoch {} batch {index}: {msg}", epoch + 1))
                    }
                    other => other,
                })?;
            clip_global_norm(&mut grads, config.clip_norm);
            opt.update(model.params.tensors_mut(), &grads);
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {} batch {index}: parameters became non-finite",
                    epoch + 1
                )));
            }
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        curve.push(mean);
        on_epoch(epoch + 1, mean)?;
    }
    Ok(TrainOutcome {
        curve,
        steps: opt.steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(
            values in proptest::collection::vec(-100.0f64..100.0, 1..40),
            split in 1usize..5,
            clip in 0.01f64..10.0,
        ) {
            let mut grads: Vec<Array2<f64>> = values
                .chunks(split)
                .map(|c| Array2::from_shape_vec((1, c.len()), c.to_vec()).unwrap())
                .collect();
            let before = global_norm(&grads);
            let reported = clip_global_norm(&mut grads, clip);
            prop_assert!((before - reported).abs() < 1e-12);
            prop_assert!(global_norm(&grads) <= clip + 1e-9);
            if before <= clip {
                prop_assert!((global_norm(&grads) - before).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::paper(0)
        };
        let mut params = vec![Array2::from_elem((1, 2), 1.0)];
        let grads = vec![Array2::from_shape_vec((1, 2), vec![0.5, -3.0]).unwrap()];
        let mut opt = AdamW::new(&config, &params);
        opt.update(&mut params, &grads);
        assert!((params[0][[0, 0]] - (1.0 - 2e-4)).abs() < 1e-10);
        assert!((params[0][[0, 1]] - (1.0 + 2e-4)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let config = TrainConfig::paper(0);
        let mut params = vec![Array2::from_elem((2, 2), 2.0)];
        let mut opt = AdamW::new(&config, &params);
        opt.update(&mut params, &[Array2::zeros((2, 2))]);
        let expected = 2.0 * (1.0 - 2e-4 * 0.01);
        assert!(params[0].iter().all(|&p| (p - expected).abs() < 1e-15));
    }
}
