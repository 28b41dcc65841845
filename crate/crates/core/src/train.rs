//! Base training: class-weighted cross-entropy with RMSprop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{ModelError, SegModel};
use crate::numerics::{self, NumericsError, OptimizerState, RmsPropConfig};
use crate::tensor::Tensor;

const WEIGHT_MIN: f64 = 1.0;
const WEIGHT_MAX: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeightMode {
    /// `median(freq) / freq_c`, clamped to `[1, 1000]`; absent classes get 0.
    InverseFrequency,
    Uniform,
    Explicit(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub decay: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub class_weights: ClassWeightMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            seed: 0,
            class_weights: ClassWeightMode::InverseFrequency,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.decay) {
            return bad(format!("decay {} must lie in [0, 1)", self.decay));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if let ClassWeightMode::Explicit(w) = &self.class_weights {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return bad("explicit class weights must be finite and non-negative".into());
            }
        }
        Ok(())
    }

    fn rmsprop(&self) -> RmsPropConfig {
        RmsPropConfig {
            learning_rate: self.learning_rate,
            decay: self.decay,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptySplit,
    #[error("sample `{id}` has class {class} but the model has {num_classes} classes")]
    ClassOutOfRange { id: String, class: u8, num_classes: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; recent losses {trace:?}")]
    NonFinite { epoch: usize, batch: usize, trace: Vec<f32> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Pixel count of each class over `samples`.
pub fn class_pixel_counts(samples: &[Sample], num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &v in s.mask.data() {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += 1;
            }
        }
    }
    counts
}

/// Median-ratio weights from pixel counts. The median is taken over classes
/// that occur.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f32> {
    let total: u64 = counts.iter().sum();
    let mut present: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64).collect();
    if present.is_empty() {
        return vec![0.0; counts.len()];
    }
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let median = if n % 2 == 1 {
        present[n / 2]
    } else {
        0.5 * (present[n / 2 - 1] + present[n / 2])
    };
    counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                (median / (c as f64 / total as f64)).clamp(WEIGHT_MIN, WEIGHT_MAX) as f32
            }
        })
        .collect()
}

pub fn class_weights(samples: &[Sample], num_classes: usize, mode: &ClassWeightMode) -> Result<Vec<f32>, TrainError> {
    match mode {
        ClassWeightMode::InverseFrequency => Ok(inverse_frequency_weights(&class_pixel_counts(samples, num_classes))),
        ClassWeightMode::Uniform => Ok(vec![1.0; num_classes]),
        ClassWeightMode::Explicit(w) if w.len() == num_classes => Ok(w.clone()),
        ClassWeightMode::Explicit(w) => Err(TrainError::Config(format!(
            "{} explicit class weights for {num_classes} classes",
            w.len()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub class_weights: Vec<f32>,
    /// Mean per-sample loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(
    model: &SegModel,
    sample: &Sample,
    weights: &[f32],
) -> Result<(f32, Vec<Tensor>), TrainError> {
    let pass = model.forward_pass(&sample.image)?;
    let (loss, seed) = numerics::weighted_softmax_cross_entropy(pass.graph.value(pass.logits), &sample.mask, weights, None)?;
    let mut grads = pass.graph.backward(pass.logits, seed)?;
    // Head weights enter the graph as 1x1 kernels; report grads in the
    // stored parameter shape.
    let mut out = Vec::with_capacity(pass.params.len());
    for (&var, param) in pass.params.iter().zip(model.parameters()) {
        let g = match grads.take(var) {
            Some(g) => g.reshape(param.shape())?,
            None => Tensor::zeros(param.shape()),
        };
        out.push(g);
    }
    Ok((loss, out))
}

pub fn train(model: &mut SegModel, samples: &[Sample], config: &TrainConfig) -> Result<TrainReport, TrainError> {
    train_with(model, samples, config, |_, _| {})
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch
/// (epochs count from 1).
pub fn train_with(
    model: &mut SegModel,
    samples: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let nc = model.num_classes();
    for s in samples {
        let class = s.mask.max_class();
        if class as usize >= nc {
            return Err(TrainError::ClassOutOfRange {
                id: s.id.clone(),
                class,
                num_classes: nc,
            });
        }
    }
    let weights = class_weights(samples, nc, &config.class_weights)?;
    let mut optimizer = OptimizerState::new(config.rmsprop(), model.parameters());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut trace: Vec<f32> = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut summed: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let (loss, grads) = sample_gradients(model, &samples[i], &weights)?;
                trace.push(loss);
                if trace.len() > 8 {
                    trace.remove(0);
                }
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch, trace });
                }
                epoch_loss += loss as f64;
                match &mut summed {
                    None => summed = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let mut grads = summed.expect("chunks are non-empty");
            if chunk.len() > 1 {
                let s = 1.0 / chunk.len() as f32;
                grads = grads.iter().map(|g| g.scale(s)).collect();
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch, trace });
            }
            optimizer.step(model.parameters_mut(), &grads)?;
        }
        let mean = epoch_loss / samples.len() as f64;
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainReport {
        class_weights: weights,
        loss_history: history,
    })
}

pub fn write_loss_csv(path: &Path, history: &[f64]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,mean_loss")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(f, "{},{l:.6}", i + 1)?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_counts_give_unit_weights() {
        assert_eq!(inverse_frequency_weights(&[10, 10, 10]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn absent_class_gets_zero() {
        let w = inverse_frequency_weights(&[900, 0, 100]);
        assert_eq!(w[1], 0.0);
        assert!(w[2] > 1.0);
    }

    #[test]
    fn weights_clamped() {
        let w = inverse_frequency_weights(&[10_000_000, 1, 1]);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 1.0);
        let w = inverse_frequency_weights(&[10_000_000, 10_000_000, 1]);
        assert_eq!(w[2], 1000.0);
    }

    #[test]
    fn rejects_bad_config() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
