//! Per-stage training configuration and the shared mini-batch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    // Full-scale settings for the four components.

    pub fn rationalizer_full_scale() -> Self {
        TrainingConfig {
            batch_size: 32,
            learning_rate: 1e-5,
            epochs: 10,
            seed: 0,
        }
    }

    pub fn generator_full_scale() -> Self {
        TrainingConfig {
            batch_size: 1,
            learning_rate: 2e-5,
            epochs: 2,
            seed: 0,
        }
    }

    pub fn selector_full_scale() -> Self {
        TrainingConfig {
            batch_size: 64,
            learning_rate: 2e-5,
            epochs: 3,
            seed: 0,
        }
    }

    pub fn inference_full_scale() -> Self {
        Self::selector_full_scale()
    }

    // Desk-scale settings for the tiny backends.

    pub fn rationalizer_tiny() -> Self {
        TrainingConfig {
            batch_size: 8,
            learning_rate: 3e-3,
            epochs: 30,
            seed: 0,
        }
    }

    pub fn generator_tiny() -> Self {
        TrainingConfig {
            batch_size: 4,
            learning_rate: 3e-3,
            epochs: 40,
            seed: 0,
        }
    }

    pub fn classifier_tiny() -> Self {
        TrainingConfig {
            batch_size: 8,
            learning_rate: 2e-3,
            epochs: 25,
            seed: 0,
        }
    }
}

/// Runs `config.epochs` passes of shuffled mini-batch Adam over `items`
/// examples. `loss` builds the graph for one example (given its index and
/// the epoch) and returns its 1×1 loss node. Per-example gradients are
/// computed in parallel and summed in example order, so results do not
/// depend on thread scheduling. Returns the mean loss of each epoch.
pub fn train_loop<T, F>(
    store: &mut ParamStore<T>,
    items: usize,
    config: &TrainingConfig,
    loss: F,
) -> Result<Vec<f64>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>, usize, usize) -> Var + Sync,
{
    config.validate()?;
    if items == 0 {
        return Err(Error::Empty("training set"));
    }
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..items).collect();
    let mut history = Vec::with_capacity(config.epochs);
    store.zero_grad();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let frozen: &ParamStore<T> = store;
            let results: Vec<(f64, Gradients<T>)> = batch
                .par_iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let l = loss(&mut g, frozen, i, epoch);
                    (g.scalar(l).as_f64(), g.backward(l))
                })
                .collect();
            let scale = T::one() / T::of(batch.len() as f64);
            for (l, grads) in results {
                total += l;
                grads.accumulate_scaled(store, scale);
            }
            adam.step(store);
        }
        history.push(total / items as f64);
        log::debug!("epoch {epoch}: mean loss {:.5}", total / items as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn full_scale_configs_validate() {
        for c in [
            TrainingConfig::rationalizer_full_scale(),
            TrainingConfig::generator_full_scale(),
            TrainingConfig::selector_full_scale(),
            TrainingConfig::inference_full_scale(),
        ] {
            c.validate().unwrap();
        }
        let row = |c: TrainingConfig| (c.batch_size, c.learning_rate, c.epochs);
        assert_eq!(row(TrainingConfig::rationalizer_full_scale()), (32, 1e-5, 10));
        assert_eq!(row(TrainingConfig::generator_full_scale()), (1, 2e-5, 2));
        assert_eq!(row(TrainingConfig::selector_full_scale()), (64, 2e-5, 3));
        assert_eq!(row(TrainingConfig::inference_full_scale()), (64, 2e-5, 3));
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut c = TrainingConfig::classifier_tiny();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainingConfig::classifier_tiny();
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fits_a_linear_classifier() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", array![[0.0, 0.0], [0.0, 0.0]]);
        let xs = [array![[1.0, 0.0]], array![[0.0, 1.0]]];
        let ys = [0usize, 1];
        let config = TrainingConfig {
            batch_size: 2,
            learning_rate: 0.1,
            epochs: 50,
            seed: 1,
        };
        let losses = train_loop(&mut store, 2, &config, |g, s, i, _| {
            let x = g.input(xs[i].clone());
            let wv = g.param(s, w);
            let logits = g.matmul(x, wv);
            g.cross_entropy(logits, &[Some(ys[i])])
        })
        .unwrap();
        assert!(losses.last().unwrap() < &0.05);
        assert!(losses.windows(2).all(|p| p[1] <= p[0] + 1e-12));
    }

    #[test]
    fn empty_training_set_errors_before_updates() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", array![[1.0f32]]);
        let res = train_loop(&mut store, 0, &TrainingConfig::classifier_tiny(), |g, _, _, _| {
            g.input(array![[0.0f32]])
        });
        assert!(matches!(res, Err(Error::Empty(_))));
    }
}
