//! Party-attentive recurrent classifier for emotion recognition in conversation.

pub mod attention;
pub mod gru;
pub mod model;
pub mod train;

pub use attention::attend;
pub use gru::GruCell;
pub use model::{
    argmax, ConversationInput, ForwardVars, Panet, PanetSpec, PanetTrace, TurnTrace, LOG_FLOOR,
};
pub use train::EpochStats;
