//! Minibatch training with Adam, gradient-norm clipping and best-on-validation
//! parameter selection.

use drip_core::config::TrainSettings;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{batch_loss, dropout_mask, loss_and_gradient, Params, Shapes};
use crate::window::{Sample, WindowSpec};
use crate::ForecastError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub dense: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
    pub window: WindowSpec,
    /// Keep every n-th training window.
    pub window_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::from(&TrainSettings::default())
    }
}

impl From<&TrainSettings> for TrainConfig {
    fn from(t: &TrainSettings) -> Self {
        TrainConfig {
            hidden: t.hidden,
            dense: t.dense,
            dropout: t.dropout,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip_norm: t.clip_norm,
            window: WindowSpec {
                lookback: t.lookback,
                horizon: t.horizon,
            },
            window_stride: t.window_stride,
            seed: t.seed,
        }
    }
}

impl TrainConfig {
    pub fn shapes(&self) -> Shapes {
        Shapes::new(self.hidden, self.dense, self.window.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss, dropout active.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
}

/// Mean-squared error over every sample with dropout off.
pub fn dataset_loss(p: &Params, samples: &[Sample]) -> f64 {
    let all: Vec<&Sample> = samples.iter().collect();
    batch_loss(p, &all, None)
}

/// Trains freshly initialised parameters (seeded by `cfg.seed`) and returns
/// the ones from the epoch with the lowest validation loss, or from the last
/// epoch when `val` is empty.
pub fn train(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Params, History), ForecastError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = Params::init(cfg.shapes(), &mut rng);
    train_from(params, train, val, cfg, &mut rng)
}

pub fn train_from(
    mut params: Params,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Params, History), ForecastError> {
    if train.is_empty() {
        return Err(ForecastError::EmptyInput("training"));
    }
    let stride = cfg.window_stride.max(1);
    let mut order: Vec<usize> = (0..train.len()).step_by(stride).collect();
    let mut adam = Adam::new(params.data.len());
    let mut history = History::default();
    let mut best: Option<(f64, Params)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let masks: Vec<Vec<f64>> = batch
                .iter()
                .map(|_| dropout_mask(cfg.hidden, cfg.dropout, rng))
                .collect();
            let (loss, mut grad) = loss_and_gradient(&params, &batch, Some(&masks));
            if !loss.is_finite() {
                return Err(ForecastError::NonFiniteLoss { epoch, batch: b, loss });
            }
            clip(&mut grad, cfg.clip_norm);
            adam.step(&mut params.data, &grad, cfg);
            loss_sum += loss;
            batches += 1;
        }
        let val_loss = (!val.is_empty()).then(|| dataset_loss(&params, val));
        if let Some(v) = val_loss {
            if !v.is_finite() {
                return Err(ForecastError::NonFiniteLoss { epoch, batch: batches, loss: v });
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, params.clone()));
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
        });
    }
    match best {
        Some((_, p)) => Ok((p, history)),
        None => {
            history.best_epoch = cfg.epochs.checked_sub(1);
            Ok((params, history))
        }
    }
}
