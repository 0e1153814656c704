//! Adam, the inverse-time learning-rate schedule and the training loop.

mod adam;
mod schedule;
mod train;

pub use adam::{adam_step, AdamState};
pub use schedule::{decayed_lr, TrainConfig};
pub use train::{
    augmentation_angle, epoch_order, evaluate, fit, train_epoch, Classifier, EpochMetrics,
    Evaluation,
};
