//! Episodes, samples, tokenization, context assembly, corpus I/O and the
//! synthetic generator.

mod context;
mod manifest;
mod synth;
mod tokenizer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, FeatureSequence, FmatError};

pub use context::{build_context, context_from_history, gloss_tokens, ContextEntry, ContextMode, MAX_CONTEXT_TOKENS};
pub use manifest::{
    format_manifest, load_corpus, parse_manifest, save_corpus, EpisodeRecord, ManifestLine, SampleRecord,
};
pub use synth::{
    best_window, generate_synthetic, write_synthetic, GeneratorConfig, LexiconSign, SyntheticCorpus, TruthRecord,
    TruthSign,
};
pub use tokenizer::{split_words, Tokenizer, BOS, EOS, NULL, PAD, SEP, SPECIALS, UNK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("feature file {0} does not exist")]
    MissingFeatures(PathBuf),
    #[error("invalid corpus: {0}")]
    Validation(String),
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fmat(#[from] FmatError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A gloss detected at a window of the sample's video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spotting {
    pub gloss: String,
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subtitle_index: u32,
    /// Relative to the manifest directory.
    pub feature_path: String,
    pub features: FeatureSequence,
    pub target: String,
    pub spottings: Vec<Spotting>,
}

/// Samples in broadcast order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub samples: Vec<Sample>,
}
