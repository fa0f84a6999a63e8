//! Corpus-level BLEU, chrF and ROUGE-L over single-reference pairs.

use std::collections::HashMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Describes the metric variants, emitted with every score report.
pub const SIGNATURE: &str = "bleu:tok=13a|case=lc|smooth=exp|order=1,4;chrf:char=6|word=0|beta=2|ws=removed;rougeL:tok=13a|case=lc|f1|avg=pair";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("metric needs at least one hypothesis/reference pair")]
    NoPairs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hypothesis: String,
    pub reference: String,
}

impl EvalPair {
    pub fn new(hypothesis: impl Into<String>, reference: impl Into<String>) -> Self {
        Self {
            hypothesis: hypothesis.into(),
            reference: reference.into(),
        }
    }
}

static RULES: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
        (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
        (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
        (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
    ]
});

/// The 13a word split applied to a lowercased line.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {} ", s.to_lowercase());
    for (re, rep) in RULES.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with n-grams up to `max_n`, exponential smoothing of zero
/// match counts and the brevity penalty, scaled to `[0, 100]`.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let mut correct = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let hyp = tokenize_13a(&p.hypothesis);
        let rf = tokenize_13a(&p.reference);
        sys_len += hyp.len();
        ref_len += rf.len();
        for n in 1..=max_n {
            let h = ngram_counts(&hyp, n);
            let r = ngram_counts(&rf, n);
            total[n - 1] += hyp.len().saturating_sub(n - 1);
            correct[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let mut precisions = vec![0.0; max_n];
    let mut smooth = 1.0;
    for n in 0..max_n {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
    }
    if precisions.iter().any(|&p| p == 0.0) {
        return Ok(0.0);
    }
    let bp = if sys_len < ref_len {
        (1.0 - ref_len as f64 / sys_len as f64).exp()
    } else {
        1.0
    };
    // Averaging logs of fractions keeps a perfect corpus at exactly 100.
    let log_mean = precisions.iter().map(|p| (p / 100.0).ln()).sum::<f64>() / max_n as f64;
    Ok(100.0 * bp * log_mean.exp())
}

fn char_ngrams(s: &str, n: usize) -> HashMap<String, usize> {
    let chars: Vec<char> = s.chars().filter(|c| !c.is_whitespace()).collect();
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus chrF: character n-gram precision and recall pooled over the corpus,
/// averaged over the orders that occur, combined as F-beta, scaled to
/// `[0, 100]`.
pub fn chrf(pairs: &[EvalPair], char_n: usize, beta: f64) -> f64 {
    let mut stats = vec![[0usize; 3]; char_n];
    for p in pairs {
        for n in 1..=char_n {
            let h = char_ngrams(&p.hypothesis, n);
            let r = char_ngrams(&p.reference, n);
            let s = &mut stats[n - 1];
            s[0] += h.values().sum::<usize>();
            s[1] += r.values().sum::<usize>();
            s[2] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let (mut avg_p, mut avg_r, mut order) = (0.0, 0.0, 0usize);
    for &[n_hyp, n_ref, n_match] in &stats {
        if n_hyp > 0 && n_ref > 0 {
            avg_p += n_match as f64 / n_hyp as f64;
            avg_r += n_match as f64 / n_ref as f64;
            order += 1;
        }
    }
    if order == 0 {
        return 0.0;
    }
    avg_p /= order as f64;
    avg_r /= order as f64;
    let b2 = beta * beta;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + b2) * avg_p * avg_r / (b2 * avg_p + avg_r)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean over pairs of the LCS-based F1, scaled to `[0, 100]`.
pub fn rouge_l_f1(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::NoPairs);
    }
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            let h = tokenize_13a(&p.hypothesis);
            let r = tokenize_13a(&p.reference);
            let l = lcs(&h, &r);
            if l == 0 {
                return 0.0;
            }
            let prec = l as f64 / h.len() as f64;
            let rec = l as f64 / r.len() as f64;
            2.0 * prec * rec / (prec + rec)
        })
        .sum();
    Ok(100.0 * sum / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub chrf: f64,
    pub n_pairs: usize,
    pub signature: String,
}

/// Every metric at its default settings.
pub fn evaluate(pairs: &[EvalPair]) -> Result<Scores, MetricsError> {
    Ok(Scores {
        bleu1: bleu(pairs, 1)?,
        bleu4: bleu(pairs, 4)?,
        rouge_l: rouge_l_f1(pairs)?,
        chrf: chrf(pairs, 6, 2.0),
        n_pairs: pairs.len(),
        signature: SIGNATURE.to_string(),
    })
}
