//! Alternating training of the recurrent classifier and the
//! common-representation learner, each augmenting the other's data.

mod augment;
mod config;
mod train;

pub use augment::{extend_with, AttachmentKind, AugmentedDataset};
pub use config::{BSource, M2r2Config, Mode, PanetDims};
pub use train::{
    ablation_run, converged, test, train, train_observed, IterationRecord, Phase, RunOutcome, TestOutcome,
    TrainedModel,
};
