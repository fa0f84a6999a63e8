use std::cmp::Ordering;

use super::{Encoded, ModelError, TranslationModel};
use crate::corpus::{BOS, EOS};
use crate::numerics::log_softmax;

/// Anything that scores the next token given a prefix.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary after `prefix`.
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeSpec {
    pub bos: u32,
    pub eos: u32,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
}

impl DecodeSpec {
    pub fn new(max_len: usize) -> Self {
        Self { bos: BOS, eos: EOS, max_len }
    }
}

/// Adapts a model and one sample's encoder outputs to [`StepScorer`].
pub struct ModelScorer<'a> {
    pub model: &'a TranslationModel,
    pub encoded: &'a Encoded,
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        Ok(log_softmax(&self.model.decode_step(self.encoded, prefix)?))
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Appends the most probable token (lowest id on ties) until EOS or
/// `max_len`. BOS and EOS are not part of the result.
pub fn greedy_decode<S: StepScorer + ?Sized>(scorer: &mut S, spec: DecodeSpec) -> Result<Vec<u32>, ModelError> {
    let mut prefix = vec![spec.bos];
    for _ in 0..spec.max_len {
        let next = argmax(&scorer.log_probs(&prefix)?);
        if next == spec.eos {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller sequence.
fn rank(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search over summed log-probabilities without length normalisation.
///
/// Each step ranks every one-token extension of the active hypotheses.
/// Extensions ending in EOS that rank within the top `beam` are retired as
/// finished; the best `beam` other extensions stay active. Search stops once
/// `beam` hypotheses have finished or after `max_len` steps, returning the
/// best finished hypothesis, or the best unfinished one if none finished.
pub fn beam_decode<S: StepScorer + ?Sized>(
    scorer: &mut S,
    beam: usize,
    spec: DecodeSpec,
) -> Result<Vec<u32>, ModelError> {
    let beam = beam.max(1);
    let mut active = vec![Hyp {
        tokens: vec![spec.bos],
        score: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..spec.max_len {
        let mut cands = Vec::with_capacity(active.len() * 8);
        for h in &active {
            let lp = scorer.log_probs(&h.tokens)?;
            for (t, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(t as u32);
                cands.push(Hyp {
                    tokens,
                    score: h.score + l,
                });
            }
        }
        cands.sort_by(rank);
        let mut next = Vec::with_capacity(beam);
        for (r, c) in cands.into_iter().enumerate() {
            if c.tokens.last() == Some(&spec.eos) {
                if r < beam {
                    finished.push(c);
                }
            } else if next.len() < beam {
                next.push(c);
            }
        }
        active = next;
        if finished.len() >= beam || active.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() { active } else { finished };
    let best = pool.into_iter().min_by(rank).expect("beam search keeps a hypothesis");
    Ok(best
        .tokens
        .into_iter()
        .skip(1)
        .filter(|&t| t != spec.eos)
        .collect())
}

impl TranslationModel {
    pub fn greedy(&self, encoded: &Encoded, max_len: usize) -> Result<Vec<u32>, ModelError> {
        greedy_decode(&mut ModelScorer { model: self, encoded }, DecodeSpec::new(max_len))
    }

    pub fn beam(&self, encoded: &Encoded, beam: usize, max_len: usize) -> Result<Vec<u32>, ModelError> {
        beam_decode(&mut ModelScorer { model: self, encoded }, beam, DecodeSpec::new(max_len))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed log-probabilities per step, independent of the prefix content.
    struct Table(Vec<Vec<f64>>);

    impl StepScorer for Table {
        fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
            Ok(log_softmax(&self.0[(prefix.len() - 1).min(self.0.len() - 1)]))
        }
    }

    #[test]
    fn first_step_eos_gives_empty_output() {
        let mut t = Table(vec![vec![0.0, 0.0, 5.0, 1.0]]);
        assert!(greedy_decode(&mut t, DecodeSpec::new(4)).unwrap().is_empty());
        assert!(beam_decode(&mut t, 2, DecodeSpec::new(4)).unwrap().is_empty());
    }

    #[test]
    fn ties_pick_the_lowest_id() {
        let mut t = Table(vec![vec![0.0, 0.0, -9.0, 3.0, 3.0], vec![0.0, 0.0, 9.0, 0.0, 0.0]]);
        assert_eq!(greedy_decode(&mut t, DecodeSpec::new(5)).unwrap(), [3]);
    }

    #[test]
    fn max_len_bounds_the_output() {
        let mut t = Table(vec![vec![0.0, 0.0, -9.0, 3.0]; 10]);
        assert_eq!(greedy_decode(&mut t, DecodeSpec::new(3)).unwrap(), [3, 3, 3]);
        assert_eq!(beam_decode(&mut t, 2, DecodeSpec::new(3)).unwrap(), [3, 3, 3]);
    }
}
