//! Common-representation learning: per-utterance representations decoded
//! into every modality, a centroid-margin classifier and per-modality
//! Wasserstein critics, plus test-time fine-tuning.

pub mod data;
pub mod export;
pub mod losses;
pub mod mlp;
pub mod state;

pub use data::{CrlInput, ModalityBlock};
pub use export::{write_h_csv, HTableRows};
pub use losses::{
    classification_loss, classification_loss_graph, gradient_penalty_exact, gradient_penalty_surrogate,
    input_gradients, predict_from_h, SURROGATE_FLOOR, reconstruction_loss, similarity_f, Centroids,
};
pub use mlp::{BatchNormState, BnMode, BnStats, Mlp};
pub use state::{critic_objective, generated_at_missing, train_critic, AdversarialOutcome, CriticStep, CrlConfig, CrlLosses, CrlState, Finetuned};

#[cfg(test)]
mod tests;
