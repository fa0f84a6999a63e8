use serde::{Deserialize, Serialize};

use super::tokenizer::{Tokenizer, SEP};
use super::{Episode, Spotting};

/// Default token budget for one context stream.
pub const MAX_CONTEXT_TOKENS: usize = 64;

/// How the preceding part of an episode becomes the context stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContextMode {
    /// Up to `k` preceding sentences, oldest first.
    Sentences { k: usize },
    /// Glosses spotted in up to `lookback` preceding samples, keeping the most
    /// recent `max`.
    Spottings { max: usize, lookback: usize },
}

impl Default for ContextMode {
    fn default() -> Self {
        ContextMode::Sentences { k: 1 }
    }
}

/// What the context builder may see of one earlier sample.
#[derive(Debug, Clone, Copy)]
pub struct ContextEntry<'a> {
    pub sentence: &'a str,
    pub spottings: &'a [Spotting],
}

/// Gloss tokens of a sample in temporal order.
pub fn gloss_tokens(spottings: &[Spotting], tok: &Tokenizer) -> Vec<u32> {
    let mut sorted: Vec<&Spotting> = spottings.iter().collect();
    sorted.sort_by_key(|s| s.window);
    sorted
        .iter()
        .map(|s| tok.id(&s.gloss.to_lowercase()))
        .collect()
}

/// Context tokens from `history`, the samples preceding the current one
/// (oldest first). At most `cap` tokens are kept, the most recent ones.
pub fn context_from_history(
    history: &[ContextEntry<'_>],
    mode: ContextMode,
    tok: &Tokenizer,
    cap: usize,
) -> Vec<u32> {
    let mut out = match mode {
        ContextMode::Sentences { k } => {
            let start = history.len().saturating_sub(k);
            let mut out = Vec::new();
            for (i, e) in history[start..].iter().enumerate() {
                if i > 0 {
                    out.push(SEP);
                }
                out.extend(tok.tokenize(e.sentence));
            }
            out
        }
        ContextMode::Spottings { max, lookback } => {
            let start = history.len().saturating_sub(lookback);
            let all: Vec<u32> = history[start..]
                .iter()
                .flat_map(|e| gloss_tokens(e.spottings, tok))
                .collect();
            all[all.len().saturating_sub(max)..].to_vec()
        }
    };
    if out.len() > cap {
        out.drain(..out.len() - cap);
    }
    out
}

/// Context for sample `n` of `episode`; reads only samples before `n`.
pub fn build_context(episode: &Episode, n: usize, mode: ContextMode, tok: &Tokenizer, cap: usize) -> Vec<u32> {
    let history: Vec<ContextEntry<'_>> = episode.samples[..n.min(episode.samples.len())]
        .iter()
        .map(|s| ContextEntry {
            sentence: &s.target,
            spottings: &s.spottings,
        })
        .collect();
    context_from_history(&history, mode, tok, cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry<'a>(sentence: &'a str, spottings: &'a [Spotting]) -> ContextEntry<'a> {
        ContextEntry { sentence, spottings }
    }

    #[test]
    fn empty_history_gives_empty_context() {
        let tok = Tokenizer::build(["a"]);
        for mode in [ContextMode::Sentences { k: 3 }, ContextMode::Spottings { max: 10, lookback: 3 }] {
            assert!(context_from_history(&[], mode, &tok, 64).is_empty());
        }
    }

    #[test]
    fn sentences_are_joined_oldest_first() {
        let tok = Tokenizer::build(["s0 s1 s2 s3 s4"]);
        let sents = ["s0", "s1", "s2", "s3", "s4"];
        let h: Vec<_> = sents.iter().map(|s| entry(s, &[])).collect();
        let c = context_from_history(&h, ContextMode::Sentences { k: 2 }, &tok, 64);
        assert_eq!(c, [tok.id("s3"), SEP, tok.id("s4")]);
    }

    #[test]
    fn spottings_keep_the_most_recent() {
        let names: Vec<String> = (0..15).map(|i| format!("g{i}")).collect();
        let tok = Tokenizer::build(names.iter().map(String::as_str));
        let mk = |r: std::ops::Range<usize>| -> Vec<Spotting> {
            r.map(|i| Spotting { gloss: names[i].clone(), window: i }).collect()
        };
        let (a, b, c) = (mk(0..4), mk(4..9), mk(9..15));
        let h = [entry("x", &a), entry("y", &b), entry("z", &c)];
        let ctx = context_from_history(&h, ContextMode::Spottings { max: 10, lookback: 3 }, &tok, 64);
        let want: Vec<u32> = names[5..].iter().map(|n| tok.id(n)).collect();
        assert_eq!(ctx, want);
    }

    #[test]
    fn cap_keeps_the_tail() {
        let tok = Tokenizer::build(["a b c d"]);
        let h = [entry("a b c d", &[])];
        let c = context_from_history(&h, ContextMode::Sentences { k: 1 }, &tok, 2);
        assert_eq!(c, [tok.id("c"), tok.id("d")]);
    }
}
