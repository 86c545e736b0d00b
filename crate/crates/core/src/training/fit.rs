use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{adam_step, bce_loss, cosine_lr, AdamConfig, AdamState};
use crate::autodiff::Tape;
use crate::data::{Batch, BatchIterator, DataError, PatchRef, SamplePair};
use crate::eval::{confusion_counts, ConfusionCounts};
use crate::model::{binarize, ChangeDetector};
use crate::nn::Mode;
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_size: 32,
            total_steps: 1000,
            seed: 8888,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: String| Err(TensorError::Config(msg));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        cosine_lr(step, self.total_steps, self.lr_max, self.lr_min)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("loss became {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    pub adam: AdamState<f32>,
}

/// Runs `cfg.total_steps` optimizer steps over seeded shuffled batches of
/// `samples`. `on_step` sees every record as soon as the step finishes.
pub fn fit(
    model: &mut ChangeDetector<f32>,
    samples: &[SamplePair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let index: BTreeMap<PatchRef, usize> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (PatchRef { site: s.site_id.clone(), patch: s.patch_id.clone() }, i))
        .collect();
    let mut batches = BatchIterator::from_ids(index.keys().cloned().collect(), cfg.batch_size, true, cfg.seed)?;
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new(model.store());
    let mut log = Vec::with_capacity(cfg.total_steps as usize);

    for step in 0..cfg.total_steps {
        let lr = cfg.lr_at(step);
        let ids = batches.next_batch();
        let batch = Batch::from_samples(ids.iter().map(|id| &samples[index[id]]))?;

        model.store_mut().zero_grad();
        let tape = Tape::new();
        let (a, b) = (tape.constant(batch.a), tape.constant(batch.b));
        let probs = model.forward(&tape, Mode::Train, &a, &b)?;
        let loss_var = bce_loss(&probs, &tape.constant(batch.mask))?;
        let loss = f64::from(loss_var.try_value()?.item()?);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        tape.backward_into(loss_var, model.store_mut())?;
        adam_step(model.store_mut(), &mut adam, &adam_cfg, lr)?;

        let record = StepRecord { step, lr, loss };
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome { log, adam })
}

/// Eval-mode confusion counts of `model` over `samples`, in chunks of
/// `batch_size`.
pub fn evaluate(model: &mut ChangeDetector<f32>, samples: &[SamplePair], batch_size: usize) -> Result<ConfusionCounts, TrainError> {
    if batch_size == 0 {
        return Err(TensorError::Config("batch_size must be positive".into()).into());
    }
    let mut total = ConfusionCounts::default();
    for chunk in samples.chunks(batch_size) {
        let batch = Batch::from_samples(chunk)?;
        let probs = model.predict(&batch.a, &batch.b)?;
        total += confusion_counts(&binarize(&probs), &batch.mask)?;
    }
    Ok(total)
}
