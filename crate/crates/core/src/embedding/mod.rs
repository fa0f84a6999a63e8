//! Input embeddings: windowed sign features, feature projection, the shared
//! word table, and sinusoidal positional encoding.

mod fmat;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{softmax_in_place, Graph, NumericsError, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

pub use fmat::{format_fmat, parse_fmat, read_fmat, write_fmat, FmatError};

/// Default clip length in frames.
pub const WINDOW_SIZE: usize = 16;
/// Default clip stride in frames.
pub const WINDOW_STRIDE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("sequence of {frames} frames is shorter than the window size {window}")]
    SequenceTooShort { frames: usize, window: usize },
    #[error("window size and stride must be positive (got {window}, {stride})")]
    BadWindow { window: usize, stride: usize },
    #[error("feature width {got} does not match expected width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },
    #[error("positional encoding needs an even model width, got {0}")]
    OddWidth(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-frame feature matrix of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `[T, F]`
    pub frames: Tensor,
    pub fps: Option<f64>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, frames: Tensor) -> Self {
        Self {
            video_id: video_id.into(),
            frames,
            fps: None,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

/// One reduced vector per sliding window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedFeatures {
    /// `[W, D]`
    pub windows: Tensor,
    pub window_size: usize,
    pub stride: usize,
}

impl WindowedFeatures {
    pub fn len(&self) -> usize {
        self.windows.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.windows.cols()
    }
}

/// Number of windows of `window` frames taken every `stride` frames.
pub fn window_count(frames: usize, window: usize, stride: usize) -> Option<usize> {
    (frames >= window && window > 0 && stride > 0).then(|| (frames - window) / stride + 1)
}

/// Frame range `[start, end)` covered by window `w`.
pub fn window_span(w: usize, window: usize, stride: usize) -> (usize, usize) {
    (w * stride, w * stride + window)
}

/// Reduces a clip of frames to one feature vector.
pub trait FeatureProvider {
    fn output_dim(&self, feature_dim: usize) -> usize;

    /// `clip` holds `window` rows of `feature_dim` values, row-major.
    fn reduce(&self, clip: &[f64], feature_dim: usize) -> Vec<f64>;
}

/// Averages the frame features of each window.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPool;

impl FeatureProvider for MeanPool {
    fn output_dim(&self, feature_dim: usize) -> usize {
        feature_dim
    }

    fn reduce(&self, clip: &[f64], feature_dim: usize) -> Vec<f64> {
        let rows = clip.len() / feature_dim;
        let mut out = vec![0.0; feature_dim];
        for frame in clip.chunks_exact(feature_dim) {
            for (o, v) in out.iter_mut().zip(frame) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        out
    }
}

/// Class probabilities from a fixed linear classifier over the mean-pooled clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    /// `[F, C]`
    pub head: Tensor,
    /// `[C]`
    pub bias: Vec<f64>,
}

impl FeatureProvider for ClassProbabilities {
    fn output_dim(&self, _feature_dim: usize) -> usize {
        self.head.cols()
    }

    fn reduce(&self, clip: &[f64], feature_dim: usize) -> Vec<f64> {
        let pooled = MeanPool.reduce(clip, feature_dim);
        let classes = self.head.cols();
        let mut logits = self.bias.clone();
        for (f, p) in pooled.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(self.head.row(f)) {
                *l += p * w;
            }
        }
        debug_assert_eq!(logits.len(), classes);
        softmax_in_place(&mut logits);
        logits
    }
}

/// Serializable choice of [`FeatureProvider`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    #[default]
    MeanPool,
    ClassProbabilities(ClassProbabilities),
}

impl ProviderConfig {
    pub fn provider(&self) -> &dyn FeatureProvider {
        match self {
            ProviderConfig::MeanPool => &MeanPool,
            ProviderConfig::ClassProbabilities(p) => p,
        }
    }
}

/// Slides a `window`-frame clip over the sequence with step `stride` and
/// reduces each clip with `provider`.
pub fn sign_embed(
    seq: &FeatureSequence,
    provider: &dyn FeatureProvider,
    window: usize,
    stride: usize,
) -> Result<WindowedFeatures, EmbeddingError> {
    if window == 0 || stride == 0 {
        return Err(EmbeddingError::BadWindow { window, stride });
    }
    let frames = seq.num_frames();
    let count = window_count(frames, window, stride)
        .ok_or(EmbeddingError::SequenceTooShort { frames, window })?;
    let f = seq.feature_dim();
    let d = provider.output_dim(f);
    let mut data = Vec::with_capacity(count * d);
    for w in 0..count {
        let (start, end) = window_span(w, window, stride);
        data.extend(provider.reduce(&seq.frames.data()[start * f..end * f], f));
    }
    Ok(WindowedFeatures {
        windows: Tensor::new(vec![count, d], data)?,
        window_size: window,
        stride,
    })
}

/// Linear projection followed by layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct FeatureProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub input_dim: usize,
}

impl FeatureProjection {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, windows: Var) -> Result<Var, EmbeddingError> {
        let width = g.value(windows).cols();
        if width != self.input_dim {
            return Err(EmbeddingError::WidthMismatch {
                expected: self.input_dim,
                got: width,
            });
        }
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        let h = g.linear(windows, w, Some(b))?;
        let (gain, bias) = (g.param(store, self.norm_gain), g.param(store, self.norm_bias));
        Ok(g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?)
    }
}

/// Projects windowed features into the model width.
pub fn feature_embed(
    g: &mut Graph,
    store: &ParamStore,
    windows: &WindowedFeatures,
    proj: &FeatureProjection,
) -> Result<Var, EmbeddingError> {
    let x = g.constant(windows.windows.clone())?;
    proj.forward(g, store, x)
}

/// Word embedding table shared by every text stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub weights: ParamId,
}

/// Looks up one table row per token.
pub fn word_embed(
    g: &mut Graph,
    store: &ParamStore,
    tokens: &[u32],
    table: &EmbeddingTable,
) -> Result<Var, EmbeddingError> {
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= table.vocab_size) {
        return Err(EmbeddingError::Vocabulary {
            id,
            vocab: table.vocab_size,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let w = g.param(store, table.weights);
    Ok(g.gather(w, &ids)?)
}

/// Sinusoidal position table `[n, d]`:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_table(n: usize, d: usize) -> Result<Tensor, EmbeddingError> {
    if d % 2 != 0 || d == 0 {
        return Err(EmbeddingError::OddWidth(d));
    }
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Adds positional encodings to `x`, whose rows are `x.rows() / seq_len`
/// consecutive sequences of length `seq_len`.
pub fn positional_encode(g: &mut Graph, x: Var, seq_len: usize) -> Result<Var, EmbeddingError> {
    let (rows, d) = (g.value(x).rows(), g.value(x).cols());
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(NumericsError::Shape {
            op: "positional_encode",
            lhs: vec![rows, d],
            rhs: vec![seq_len],
        }
        .into());
    }
    let table = positional_table(seq_len, d)?;
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows / seq_len {
        data.extend_from_slice(table.data());
    }
    let pe = g.constant(Tensor::new(vec![rows, d], data)?)?;
    Ok(g.add(x, pe)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(frames: usize, dim: usize, value: f64) -> FeatureSequence {
        FeatureSequence::new("v", Tensor::new(vec![frames, dim], vec![value; frames * dim]).unwrap())
    }

    #[test]
    fn window_counts() {
        let s = sign_embed(&seq(16, 4, 1.0), &MeanPool, 16, 4).unwrap();
        assert_eq!(s.len(), 1);
        let s = sign_embed(&seq(64, 4, 1.0), &MeanPool, 16, 4).unwrap();
        assert_eq!(s.len(), 13);
    }

    #[test]
    fn constant_frames_pool_to_constant_windows() {
        let s = sign_embed(&seq(40, 4, 1.0), &MeanPool, 16, 4).unwrap();
        for row in s.windows.row_iter() {
            assert_eq!(row, &[1.0, 1.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn too_short_sequence_reports_lengths() {
        let err = sign_embed(&seq(10, 2, 0.0), &MeanPool, 16, 4).unwrap_err();
        assert_eq!(err, EmbeddingError::SequenceTooShort { frames: 10, window: 16 });
    }

    #[test]
    fn class_probabilities_are_a_distribution() {
        let head = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0]).unwrap();
        let provider = ClassProbabilities { head, bias: vec![0.0; 3] };
        let s = sign_embed(&seq(20, 2, 0.3), &provider, 16, 4).unwrap();
        assert_eq!(s.dim(), 3);
        for row in s.windows.row_iter() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_table_first_rows() {
        let pe = positional_table(2, 6).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.row(1)[0] - 0.841471).abs() < 1e-6);
        assert_eq!(positional_table(3, 5).unwrap_err(), EmbeddingError::OddWidth(5));
    }

    #[test]
    fn positional_encode_of_zeros_is_the_table() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![5, 4])).unwrap();
        let y = positional_encode(&mut g, x, 5).unwrap();
        assert_eq!(g.value(y), &positional_table(5, 4).unwrap());
    }

    #[test]
    fn out_of_range_token_is_reported() {
        let mut store = ParamStore::new();
        let weights = store.add("t", Tensor::zeros(vec![3, 2])).unwrap();
        let table = EmbeddingTable { vocab_size: 3, dim: 2, weights };
        let mut g = Graph::new();
        let err = word_embed(&mut g, &store, &[0, 3], &table).unwrap_err();
        assert_eq!(err, EmbeddingError::Vocabulary { id: 3, vocab: 3 });
    }
}
