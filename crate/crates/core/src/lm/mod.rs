//! Language model over the merged vocabulary: tokenizer, sequence layout,
//! the transformer itself and its checkpoints.

pub mod attention;
pub mod model;
pub mod sequence;
pub mod vocab;

pub use model::{
    generation_mask, Checkpoint, Decoding, LanguageModel, LossStats, ModelInput, TemporalEncoding, Trainable,
    TransformerConfig, CHECKPOINT_KIND,
};
pub use sequence::{assemble_sequence, AssembledSequence};
pub use vocab::{
    build_text_vocab, extend_embeddings, extend_vocabulary, join_words, split_words, CollisionError, TextVocab,
    Vocabulary, VocabularyParts, SPECIALS,
};

use crate::container::ContainerError;

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("sequence of {len} tokens exceeds the context of {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} outside a vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("continuous temporal encoding needs one patch row per temporal position")]
    MissingPatches,
    #[error("no target positions are masked in")]
    EmptyMask,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}
