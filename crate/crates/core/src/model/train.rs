use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, Gradients, ModelParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 120,
            epochs: 500,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::argument("batch_size and epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::argument("learning rate must be positive and betas in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, tc: &TrainConfig) -> Self {
        let zeros = params.zero_gradients();
        Adam {
            lr: tc.learning_rate,
            beta1: tc.beta1,
            beta2: tc.beta2,
            epsilon: tc.epsilon,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((tensor, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..tensor.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                tensor[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch Adam on softmax cross-entropy. Sample order is reshuffled
/// every epoch from a generator seeded with `tc.seed`.
pub fn train(params: &ModelParams, ds: &Dataset, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    if ds.series_length() != params.input_length() {
        return Err(Error::argument(format!(
            "dataset series length {} does not match model input length {}",
            ds.series_length(),
            params.input_length()
        )));
    }
    if ds.num_classes > params.num_classes() {
        return Err(Error::argument(format!(
            "dataset has {} classes, model only {}",
            ds.num_classes,
            params.num_classes()
        )));
    }

    let mut params = params.clone();
    let mut adam = Adam::new(&params, tc);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut loss_history = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let mut grads = params.zero_gradients();
            for &i in batch {
                epoch_loss += params.loss_and_gradient(&ds.samples[i], ds.labels[i], &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            adam.step(&mut params, &grads);
        }
        let mean = epoch_loss / ds.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        loss_history.push(mean);
    }
    Ok(TrainReport {
        params,
        loss_history,
    })
}
