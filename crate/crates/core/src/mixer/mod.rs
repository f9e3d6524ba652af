//! Monotone state-conditioned mixing of per-agent values, per-step credit
//! weights, and the centralized offline training loop.

mod hypernet;
mod train;
mod vgca;

pub use hypernet::{Hypernet, HypernetCache, MixerWeights, WeightTransform};
pub use train::{load_model, AwrqMixer, TimingRow, TrainLogRow, Trainer, TrainerConfig};
pub use vgca::{vgca_weights, VgcaWeights};
