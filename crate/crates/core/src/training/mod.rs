//! Loss, optimizer, learning-rate schedule, training loop and checkpoints.

mod adam;
mod checkpoint;
mod fit;
mod loss;
mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError, ManifestEntry, NamedTensor, TensorKind, FORMAT_VERSION, MAGIC};
pub use fit::{evaluate, fit, StepRecord, TrainConfig, TrainError, TrainOutcome};
pub use loss::bce_loss;
pub use schedule::cosine_lr;

/// Probability clamp used by [`bce_loss`].
pub const BCE_EPS: f64 = 1e-7;
