//! Prompt encoder, two-way transformer mask decoder and the BCE objective.

mod decoder;
mod loss;
mod prompt;

pub use decoder::{DecoderCache, MaskDecoder, MaskLogits, TwoWayBlock};
pub use loss::{bce_loss, bce_loss_grad, GroundTruthMask};
pub use prompt::{
    positional_encoding, PointLabel, PromptBox, PromptEmbeddings, PromptEncoder, PromptPoint, PromptSet, TokenSource,
};
