use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{EncoderStack, Init, Memory, MultiModalDecoder, Pass};
use super::{make_masks, ModelConfig, ModelError, Stream};
use crate::corpus::{BOS, EOS, NULL, PAD};
use crate::embedding::{positional_encode, word_embed, EmbeddingTable, FeatureProjection};
use crate::numerics::{cross_entropy_label_smoothed, Graph, ParamId, ParamStore, Tensor, Var};

/// Raw inputs of one sample. Text streams exclude the null token, which the
/// model prepends itself.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelInput {
    /// Windowed features `[W, D]`.
    pub video: Option<Tensor>,
    pub context: Vec<u32>,
    pub spottings: Vec<u32>,
}

/// Encoder outputs of a single sample, keyed by stream in cascade order.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub memories: Vec<(Stream, Tensor)>,
}

impl Encoded {
    pub fn get(&self, stream: Stream) -> Option<&Tensor> {
        self.memories.iter().find(|(s, _)| *s == stream).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, stream: Stream) -> Option<&mut Tensor> {
        self.memories.iter_mut().find(|(s, _)| *s == stream).map(|(_, t)| t)
    }
}

#[derive(Debug, Clone)]
pub struct TranslationModel {
    config: ModelConfig,
    store: ParamStore,
    word_table: EmbeddingTable,
    feature_proj: Option<FeatureProjection>,
    encoders: Vec<(Stream, EncoderStack)>,
    decoder: MultiModalDecoder,
    out_w: ParamId,
    out_b: ParamId,
}

impl TranslationModel {
    /// Builds a freshly initialised model. Parameters are created in a fixed
    /// order, so the seed alone determines every value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.d_model;
        let weights = init.normal("embed.word", config.vocab_size, d, (d as f64).powf(-0.5))?;
        let word_table = EmbeddingTable {
            vocab_size: config.vocab_size,
            dim: d,
            weights,
        };
        let feature_proj = if config.streams.video {
            Some(FeatureProjection {
                weight: init.xavier("embed.video.w", config.feature_dim, d)?,
                bias: init.constant("embed.video.b", d, 0.0)?,
                norm_gain: init.constant("embed.video.norm.g", d, 1.0)?,
                norm_bias: init.constant("embed.video.norm.b", d, 0.0)?,
                input_dim: config.feature_dim,
            })
        } else {
            None
        };
        let streams = config.streams.streams();
        let encoders = streams
            .iter()
            .map(|&s| {
                let stack = EncoderStack::new(&mut init, &format!("encoder.{}", s.name()), config.layers, d, config.d_ff)?;
                Ok((s, stack))
            })
            .collect::<Result<_, ModelError>>()?;
        let decoder = MultiModalDecoder::new(&mut init, config.layers, &streams, d, config.d_ff)?;
        let out_w = init.xavier("out.w", d, config.vocab_size)?;
        let out_b = init.constant("out.b", config.vocab_size, 0.0)?;
        Ok(Self {
            config,
            store,
            word_table,
            feature_proj,
            encoders,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The single table read by context, spotting and target tokens.
    pub fn word_table(&self) -> &EmbeddingTable {
        &self.word_table
    }

    pub fn decoder(&self) -> &MultiModalDecoder {
        &self.decoder
    }

    pub fn encoder(&self, stream: Stream) -> Option<&EncoderStack> {
        self.encoders.iter().find(|(s, _)| *s == stream).map(|(_, e)| e)
    }

    fn pass<'a>(&self, store: &'a ParamStore, rng: Option<&'a mut ChaCha8Rng>) -> Pass<'a> {
        Pass {
            store,
            heads: self.config.heads,
            dropout: self.config.dropout,
            rng,
        }
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.max_positions {
            return Err(ModelError::TooLong {
                len,
                max: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Embeds a padded batch of token sequences: `[B * width, d]`.
    fn embed_tokens(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        seqs: &[Vec<u32>],
        width: usize,
    ) -> Result<Var, ModelError> {
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            self.check_len(s.len())?;
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, width - s.len()));
        }
        let x = word_embed(g, pass.store, &ids, &self.word_table)?;
        let x = positional_encode(g, x, width)?;
        pass.drop(g, x)
    }

    fn embed_video(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        videos: &[&Tensor],
        width: usize,
    ) -> Result<Var, ModelError> {
        let proj = self.feature_proj.as_ref().ok_or(ModelError::MissingStream(Stream::Video))?;
        let f = proj.input_dim;
        let mut data = Vec::with_capacity(videos.len() * width * f);
        for v in videos {
            self.check_len(v.rows())?;
            if v.cols() != f {
                return Err(crate::embedding::EmbeddingError::WidthMismatch {
                    expected: f,
                    got: v.cols(),
                }
                .into());
            }
            data.extend_from_slice(v.data());
            data.extend(std::iter::repeat_n(0.0, (width - v.rows()) * f));
        }
        let x = g.constant(Tensor::new(vec![videos.len() * width, f], data)?)?;
        let x = proj.forward(g, pass.store, x)?;
        let x = positional_encode(g, x, width)?;
        pass.drop(g, x)
    }

    fn text_stream(input: &ModelInput, stream: Stream) -> Vec<u32> {
        let raw = match stream {
            Stream::Context => &input.context,
            _ => &input.spottings,
        };
        let mut s = Vec::with_capacity(raw.len() + 1);
        s.push(NULL);
        s.extend_from_slice(raw);
        s
    }

    /// Runs the full model over a batch with teacher forcing. `tgt_in` rows
    /// start with BOS. Returns logits `[B * T, vocab]` with `T` the longest
    /// target row.
    fn forward(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        inputs: &[&ModelInput],
        tgt_in: &[Vec<u32>],
    ) -> Result<Var, ModelError> {
        let streams = self.config.streams.streams();
        let mut sources = Vec::with_capacity(streams.len());
        for &s in &streams {
            let lengths = inputs
                .iter()
                .map(|inp| match s {
                    Stream::Video => inp.video.as_ref().map(Tensor::rows).ok_or(ModelError::MissingStream(s)),
                    Stream::Context => Ok(inp.context.len()),
                    Stream::Spotting => Ok(inp.spottings.len()),
                })
                .collect::<Result<Vec<_>, _>>()?;
            sources.push((s, lengths));
        }
        let tgt_lengths: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let masks = make_masks(&sources, &tgt_lengths);

        let mut memories = Vec::with_capacity(streams.len());
        for (sm, (stream, encoder)) in masks.streams.iter().zip(&self.encoders) {
            let x = if *stream == Stream::Video {
                let videos: Vec<&Tensor> = inputs.iter().map(|i| i.video.as_ref().expect("checked")).collect();
                self.embed_video(g, pass, &videos, sm.width)?
            } else {
                let seqs: Vec<Vec<u32>> = inputs.iter().map(|i| Self::text_stream(i, *stream)).collect();
                self.embed_tokens(g, pass, &seqs, sm.width)?
            };
            let h = encoder.forward(g, pass, x, &sm.encoder)?;
            memories.push(Memory {
                stream: *stream,
                value: h,
                mask: &sm.cross,
            });
        }
        self.decode_over(g, pass, &memories, tgt_in, &masks.causal)
    }

    fn decode_over(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        memories: &[Memory<'_>],
        tgt_in: &[Vec<u32>],
        causal: &crate::numerics::AttentionMask,
    ) -> Result<Var, ModelError> {
        if tgt_in.iter().any(|t| t.first() != Some(&BOS)) {
            return Err(ModelError::MissingBos);
        }
        let width = causal.query_len();
        let y = self.embed_tokens(g, pass, tgt_in, width)?;
        let h = self.decoder.forward(g, pass, y, causal, memories)?;
        let (w, b) = (g.param(pass.store, self.out_w), g.param(pass.store, self.out_b));
        Ok(g.linear(h, w, Some(b))?)
    }

    /// Mean label-smoothed cross-entropy of `targets` (word ids without BOS
    /// or EOS) under teacher forcing, against an explicit parameter store.
    /// Dropout is applied only when `rng` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[&ModelInput],
        targets: &[&[u32]],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let tgt_in: Vec<Vec<u32>> = targets
            .iter()
            .map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect())
            .collect();
        let width = tgt_in.iter().map(Vec::len).max().unwrap_or(0);
        let mut gold = Vec::with_capacity(targets.len() * width);
        for t in targets {
            gold.extend_from_slice(t);
            gold.push(EOS);
            gold.extend(std::iter::repeat_n(PAD, width - t.len() - 1));
        }
        let mut pass = self.pass(store, rng);
        let logits = self.forward(g, &mut pass, inputs, &tgt_in)?;
        Ok(cross_entropy_label_smoothed(g, logits, &gold, smoothing, PAD)?)
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        inputs: &[&ModelInput],
        targets: &[&[u32]],
        smoothing: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        self.loss_with(g, &self.store, inputs, targets, smoothing, rng)
    }

    /// Teacher-forced logits `[len(tgt_in), vocab]` in evaluation mode.
    pub fn teacher_forced_logits(&self, input: &ModelInput, tgt_in: &[u32]) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let mut pass = self.pass(&self.store, None);
        let logits = self.forward(&mut g, &mut pass, &[input], &[tgt_in.to_vec()])?;
        Ok(g.value(logits).clone())
    }

    /// Encodes every enabled stream of one sample in evaluation mode.
    pub fn encode(&self, input: &ModelInput) -> Result<Encoded, ModelError> {
        let mut g = Graph::new();
        let mut pass = self.pass(&self.store, None);
        let mut memories = Vec::new();
        for (stream, encoder) in &self.encoders {
            let (x, len) = if *stream == Stream::Video {
                let v = input.video.as_ref().ok_or(ModelError::MissingStream(Stream::Video))?;
                (self.embed_video(&mut g, &mut pass, &[v], v.rows())?, v.rows())
            } else {
                let s = Self::text_stream(input, *stream);
                let n = s.len();
                (self.embed_tokens(&mut g, &mut pass, &[s], n)?, n)
            };
            let mask = crate::numerics::AttentionMask::full(1, len, len);
            let h = encoder.forward(&mut g, &mut pass, x, &mask)?;
            memories.push((*stream, g.value(h).clone()));
        }
        Ok(Encoded { memories })
    }

    /// Next-token logits after `prefix`, which must start with BOS.
    pub fn decode_step(&self, encoded: &Encoded, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        self.check_len(prefix.len())?;
        let mut g = Graph::new();
        let mut pass = self.pass(&self.store, None);
        let t = prefix.len();
        let masks: Vec<(Stream, Var, crate::numerics::AttentionMask)> = self
            .config
            .streams
            .streams()
            .into_iter()
            .map(|s| {
                let mem = encoded.get(s).ok_or(ModelError::MissingStream(s))?;
                let n = mem.rows();
                Ok((s, g.constant(mem.clone())?, crate::numerics::AttentionMask::full(1, t, n)))
            })
            .collect::<Result<_, ModelError>>()?;
        let memories: Vec<Memory<'_>> = masks
            .iter()
            .map(|(s, v, m)| Memory {
                stream: *s,
                value: *v,
                mask: m,
            })
            .collect();
        let causal = crate::numerics::AttentionMask::causal(t);
        let logits = self.decode_over(&mut g, &mut pass, &memories, &[prefix.to_vec()], &causal)?;
        Ok(g.value(logits).row(t - 1).to_vec())
    }
}
