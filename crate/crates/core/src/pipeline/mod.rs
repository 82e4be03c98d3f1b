//! Long-dialogue corpus construction.
//!
//! Short dialogues are cleaned, chained into triplets of semantically close
//! but image-disjoint dialogues, concatenated into long dialogues, and turned
//! into retrieval tasks from their tags. Rewriting and tagging by a language
//! model happen outside this crate; the pipeline only emits the prompts.

mod assemble;
mod clean;
mod sample;
mod triplets;

use thiserror::Error;

use crate::embeddings::{cosine, EmbeddingError, EmbeddingVector};

pub use assemble::{annotation_prompt, assemble_longform, generation_prompt, Assembled, ProvenanceEntry};
pub use clean::{check_dialogue, clean_corpus, CleaningConfig, CleaningFilter, CleaningOutcome, CleaningReportLine};
pub use sample::{sample_tasks, SamplingOutcome, TaskSamplingConfig, TypeWeights};
pub use triplets::{
    dialogue_profile, dialogue_profiles, image_identity, match_all, match_triplets, AnchorOutcome, DialogueProfile,
    Triplet, TripletConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("anchor {anchor}: {found} candidate(s) for {level}, need {needed}")]
    InsufficientCandidates { anchor: String, level: &'static str, found: usize, needed: usize },
    #[error("unknown dialogue {0}")]
    UnknownDialogue(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Provider(#[from] EmbeddingError),
}

/// Cosine where a zero vector counts as unrelated.
pub(crate) fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    match cosine(a, b) {
        Err(EmbeddingError::ZeroVector) => Ok(0.0),
        other => other,
    }
}
