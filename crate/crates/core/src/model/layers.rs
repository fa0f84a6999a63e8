use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Stream};
use crate::numerics::{AttentionMask, Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

/// Creates named parameters with the model's initialisation scheme.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Xavier-uniform `[rows, cols]`.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId, ModelError> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..=a)).collect();
        Ok(self.store.add(name, Tensor::new(vec![rows, cols], data)?)?)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId, ModelError> {
        let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        Ok(self.store.add(name, Tensor::new(vec![rows, cols], data)?)?)
    }

    pub fn constant(&mut self, name: &str, n: usize, value: f64) -> Result<ParamId, ModelError> {
        Ok(self.store.add(name, Tensor::vector(vec![value; n]))?)
    }
}

/// Per-forward-pass settings: dropout is active only when an RNG is supplied.
pub(crate) struct Pass<'a> {
    pub store: &'a ParamStore,
    pub heads: usize,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Pass<'_> {
    pub fn drop(&mut self, g: &mut Graph, x: Var) -> Result<Var, ModelError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => Ok(g.dropout(x, self.dropout, rng)?),
            _ => Ok(x),
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Result<Var, ModelError> {
        let (gv, bv) = (g.param(self.store, gain), g.param(self.store, bias));
        Ok(g.layer_norm(x, gv, bv, LAYER_NORM_EPS)?)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var, ModelError> {
        let (wv, bv) = (g.param(self.store, w), g.param(self.store, b));
        Ok(g.linear(x, wv, Some(bv))?)
    }
}

/// Query, key, value and output projections around scaled dot-product
/// attention.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MultiHeadAttention {
    pub(crate) fn new(init: &mut Init<'_>, prefix: &str, d: usize) -> Result<Self, ModelError> {
        let mut pair = |n: &str| -> Result<(ParamId, ParamId), ModelError> {
            Ok((
                init.xavier(&format!("{prefix}.w{n}"), d, d)?,
                init.constant(&format!("{prefix}.b{n}"), d, 0.0)?,
            ))
        };
        let (wq, bq) = pair("q")?;
        let (wk, bk) = pair("k")?;
        let (wv, bv) = pair("v")?;
        let (wo, bo) = pair("o")?;
        Ok(Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    /// `q: [B*nq, d]`, `k, v: [B*nk, d]`; returns `[B*nq, d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttentionMask,
        heads: usize,
    ) -> Result<Var, ModelError> {
        let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| -> Result<Var, ModelError> {
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            Ok(g.linear(x, wv, Some(bv))?)
        };
        let qp = lin(g, q, self.wq, self.bq)?;
        let kp = lin(g, k, self.wk, self.bk)?;
        let vp = lin(g, v, self.wv, self.bv)?;
        let a = g.attention(qp, kp, vp, mask, heads)?;
        lin(g, a, self.wo, self.bo)
    }
}

/// Attention sub-layer with dropout, residual and post-norm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnSublayer {
    pub attn: MultiHeadAttention,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

impl AttnSublayer {
    pub fn new(init: &mut Init<'_>, prefix: &str, d: usize) -> Result<Self, ModelError> {
        Ok(Self {
            attn: MultiHeadAttention::new(init, prefix, d)?,
            norm_g: init.constant(&format!("{prefix}.norm.g"), d, 1.0)?,
            norm_b: init.constant(&format!("{prefix}.norm.b"), d, 0.0)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        x: Var,
        memory: Var,
        mask: &AttentionMask,
    ) -> Result<Var, ModelError> {
        let y = self.attn.forward(g, pass.store, x, memory, memory, mask, pass.heads)?;
        let y = pass.drop(g, y)?;
        let s = g.add(x, y)?;
        pass.norm(g, s, self.norm_g, self.norm_b)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, prefix: &str, d: usize, d_ff: usize) -> Result<Self, ModelError> {
        Ok(Self {
            w1: init.xavier(&format!("{prefix}.w1"), d, d_ff)?,
            b1: init.constant(&format!("{prefix}.b1"), d_ff, 0.0)?,
            w2: init.xavier(&format!("{prefix}.w2"), d_ff, d)?,
            b2: init.constant(&format!("{prefix}.b2"), d, 0.0)?,
            norm_g: init.constant(&format!("{prefix}.norm.g"), d, 1.0)?,
            norm_b: init.constant(&format!("{prefix}.norm.b"), d, 0.0)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, pass: &mut Pass<'_>, x: Var) -> Result<Var, ModelError> {
        let h = pass.linear(g, x, self.w1, self.b1)?;
        let h = g.relu(h)?;
        let h = pass.drop(g, h)?;
        let y = pass.linear(g, h, self.w2, self.b2)?;
        let y = pass.drop(g, y)?;
        let s = g.add(x, y)?;
        pass.norm(g, s, self.norm_g, self.norm_b)
    }
}

/// Self-attention and feed-forward blocks; output shape equals input shape.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<(AttnSublayer, FeedForward)>,
}

impl EncoderStack {
    pub(crate) fn new(init: &mut Init<'_>, prefix: &str, layers: usize, d: usize, d_ff: usize) -> Result<Self, ModelError> {
        let layers = (0..layers)
            .map(|l| {
                Ok((
                    AttnSublayer::new(init, &format!("{prefix}.{l}.self"), d)?,
                    FeedForward::new(init, &format!("{prefix}.{l}.ff"), d, d_ff)?,
                ))
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        mut x: Var,
        mask: &AttentionMask,
    ) -> Result<Var, ModelError> {
        for (attn, ff) in &self.layers {
            x = attn.forward(g, pass, x, x, mask)?;
            x = ff.forward(g, pass, x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayer {
    pub self_attn: AttnSublayer,
    /// Cross-attention sub-layers in cascade order, enabled streams only.
    pub cross: Vec<(Stream, AttnSublayer)>,
    pub ff: FeedForward,
}

/// Decoder memory of one stream for a batch.
pub(crate) struct Memory<'a> {
    pub stream: Stream,
    pub value: Var,
    pub mask: &'a AttentionMask,
}

/// Masked self-attention followed by the context, video and spotting
/// cross-attention cascade and a feed-forward block, per layer.
#[derive(Debug, Clone)]
pub struct MultiModalDecoder {
    pub(crate) layers: Vec<DecoderLayer>,
}

impl MultiModalDecoder {
    pub(crate) fn new(
        init: &mut Init<'_>,
        layers: usize,
        streams: &[Stream],
        d: usize,
        d_ff: usize,
    ) -> Result<Self, ModelError> {
        let layers = (0..layers)
            .map(|l| {
                let self_attn = AttnSublayer::new(init, &format!("decoder.{l}.self"), d)?;
                let cross = streams
                    .iter()
                    .map(|&s| Ok((s, AttnSublayer::new(init, &format!("decoder.{l}.cross_{}", s.name()), d)?)))
                    .collect::<Result<_, ModelError>>()?;
                let ff = FeedForward::new(init, &format!("decoder.{l}.ff"), d, d_ff)?;
                Ok(DecoderLayer { self_attn, cross, ff })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self { layers })
    }

    /// Stream order of the cross-attention sub-layers.
    pub fn cascade(&self) -> Vec<Stream> {
        self.layers
            .first()
            .map(|l| l.cross.iter().map(|(s, _)| *s).collect())
            .unwrap_or_default()
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        pass: &mut Pass<'_>,
        mut x: Var,
        causal: &AttentionMask,
        memories: &[Memory<'_>],
    ) -> Result<Var, ModelError> {
        for layer in &self.layers {
            x = layer.self_attn.forward(g, pass, x, x, causal)?;
            for (stream, sub) in &layer.cross {
                let mem = memories
                    .iter()
                    .find(|m| m.stream == *stream)
                    .ok_or(ModelError::MissingStream(*stream))?;
                x = sub.forward(g, pass, x, mem.value, mem.mask)?;
            }
            x = layer.ff.forward(g, pass, x)?;
        }
        Ok(x)
    }
}
