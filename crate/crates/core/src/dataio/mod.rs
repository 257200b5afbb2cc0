//! Conversations, modality masks, the dataset file format and synthetic data.

pub mod io;
pub mod mask;
pub mod model;
pub mod synth;

pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use mask::{generate_mask, MAX_MISSING_RATE};
pub use model::{
    apply_mask, missing_rate, split_dataset, Conversation, Dataset, Dims, Modality, ModalityMask,
    Utterance, NUM_MODALITIES,
};
pub use synth::{generate_synthetic, SynthSpec};
