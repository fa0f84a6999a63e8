//! Three encoders, the cascaded multi-modal decoder, decoding and checkpoints.

mod checkpoint;
mod decode;
mod layers;
mod translation;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::numerics::{AttentionMask, NumericsError};

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use decode::{beam_decode, greedy_decode, DecodeSpec, ModelScorer, StepScorer};
pub use layers::{EncoderStack, MultiHeadAttention, MultiModalDecoder};
pub use translation::{Encoded, ModelInput, TranslationModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sample is missing the {0} stream")]
    MissingStream(Stream),
    #[error("sequence of {len} tokens exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("decoder prefix must start with BOS")]
    MissingBos,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Input streams in decoder cascade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Context,
    Video,
    Spotting,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Context, Stream::Video, Stream::Spotting];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Context => "context",
            Stream::Video => "video",
            Stream::Spotting => "spotting",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Stream::Context => 'C',
            Stream::Video => 'V',
            Stream::Spotting => 'S',
        }
    }

    pub fn is_text(self) -> bool {
        self != Stream::Video
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Enabled input streams, written `C+V+S` style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamSet {
    pub context: bool,
    pub video: bool,
    pub spotting: bool,
}

impl StreamSet {
    pub const ALL: StreamSet = StreamSet {
        context: true,
        video: true,
        spotting: true,
    };

    /// Ablation rows in reporting order.
    pub const ABLATION_ROWS: [StreamSet; 6] = [
        StreamSet::of(false, true, false),
        StreamSet::of(true, false, false),
        StreamSet::of(false, false, true),
        StreamSet::of(true, true, false),
        StreamSet::of(true, false, true),
        StreamSet::of(true, true, true),
    ];

    pub const fn of(context: bool, video: bool, spotting: bool) -> Self {
        Self {
            context,
            video,
            spotting,
        }
    }

    pub fn contains(&self, s: Stream) -> bool {
        match s {
            Stream::Context => self.context,
            Stream::Video => self.video,
            Stream::Spotting => self.spotting,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.context || self.video || self.spotting)
    }

    /// Enabled streams in cascade order.
    pub fn streams(&self) -> Vec<Stream> {
        Stream::ALL.into_iter().filter(|&s| self.contains(s)).collect()
    }

    pub fn label(&self) -> String {
        self.streams()
            .iter()
            .map(|s| s.letter().to_string())
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for StreamSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for StreamSet {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = StreamSet::default();
        for part in s.split('+').map(str::trim) {
            let slot = match part.to_ascii_lowercase().as_str() {
                "c" | "context" => &mut set.context,
                "v" | "video" => &mut set.video,
                "s" | "spot" | "spotting" => &mut set.spotting,
                _ => return Err(ModelError::Config(format!("unknown stream {part:?} in {s:?}"))),
            };
            if *slot {
                return Err(ModelError::Config(format!("stream {part:?} repeated in {s:?}")));
            }
            *slot = true;
        }
        Ok(set)
    }
}

impl TryFrom<String> for StreamSet {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<StreamSet> for String {
    fn from(s: StreamSet) -> Self {
        s.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Width of the windowed video features.
    pub feature_dim: usize,
    pub streams: StreamSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            d_ff: 1024,
            layers: 2,
            heads: 8,
            dropout: 0.1,
            vocab_size: 0,
            max_positions: 512,
            feature_dim: 1024,
            streams: StreamSet::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.d_ff == 0 {
            return fail("d_model and d_ff must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("positional encoding needs an even d_model, got {}", self.d_model));
        }
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.streams.is_empty() {
            return fail("at least one input stream must be enabled".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < crate::corpus::SPECIALS.len() {
            return fail(format!("vocab_size {} cannot hold the special tokens", self.vocab_size));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        if self.streams.video && self.feature_dim == 0 {
            return fail("feature_dim must be positive when video is enabled".into());
        }
        Ok(())
    }
}

/// Attention masks for one padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    /// Decoder self-attention: causal and target padding.
    pub causal: AttentionMask,
    /// Per stream: encoder self-attention mask, decoder cross-attention mask
    /// and key lengths (null token included for text streams).
    pub streams: Vec<StreamMasks>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamMasks {
    pub stream: Stream,
    pub lengths: Vec<usize>,
    pub width: usize,
    pub encoder: AttentionMask,
    pub cross: AttentionMask,
}

/// Builds masks from raw source lengths per stream (before the null token is
/// prepended to text streams) and target lengths.
pub fn make_masks(sources: &[(Stream, Vec<usize>)], tgt_lengths: &[usize]) -> Masks {
    let t = tgt_lengths.iter().copied().max().unwrap_or(0);
    let streams = sources
        .iter()
        .map(|(stream, raw)| {
            let lengths: Vec<usize> = raw.iter().map(|&n| n + usize::from(stream.is_text())).collect();
            let width = lengths.iter().copied().max().unwrap_or(0);
            StreamMasks {
                stream: *stream,
                encoder: AttentionMask::padding(&lengths, width, width),
                cross: AttentionMask::padding(&lengths, t, width),
                lengths,
                width,
            }
        })
        .collect();
    Masks {
        causal: AttentionMask::causal_padded(tgt_lengths, t),
        streams,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_masks_are_lower_triangular() {
        let m = make_masks(&[], &[1]);
        assert!(m.causal.get(0, 0, 0));
        let m = make_masks(&[], &[3]);
        let rows: Vec<Vec<bool>> = (0..3).map(|i| (0..3).map(|j| m.causal.get(0, i, j)).collect()).collect();
        assert_eq!(
            rows,
            vec![vec![true, false, false], vec![true, true, false], vec![true, true, true]]
        );
    }

    #[test]
    fn empty_text_stream_sees_only_the_null_token() {
        let m = make_masks(&[(Stream::Spotting, vec![0, 2])], &[2, 2]);
        let s = &m.streams[0];
        assert_eq!(s.lengths, [1, 3]);
        assert_eq!((0..3).map(|j| s.cross.get(0, 0, j)).collect::<Vec<_>>(), [true, false, false]);
        assert_eq!((0..3).map(|j| s.cross.get(1, 1, j)).collect::<Vec<_>>(), [true, true, true]);
    }

    #[test]
    fn stream_sets_parse_and_print() {
        let s: StreamSet = "V+C".parse().unwrap();
        assert_eq!(s.label(), "C+V");
        assert_eq!(s.streams(), [Stream::Context, Stream::Video]);
        assert!("C+C".parse::<StreamSet>().is_err());
        assert!("X".parse::<StreamSet>().is_err());
        let labels: Vec<String> = StreamSet::ABLATION_ROWS.iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["V", "C", "S", "C+V", "C+S", "C+V+S"]);
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        ok.validate().unwrap();
        for bad in [
            ModelConfig { heads: 3, ..ok.clone() },
            ModelConfig { layers: 0, ..ok.clone() },
            ModelConfig {
                streams: StreamSet::default(),
                ..ok.clone()
            },
            ModelConfig { vocab_size: 2, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
