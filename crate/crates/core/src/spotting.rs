//! Automatic sign spotting by exemplar voting.
//!
//! For a word and a reference video whose subtitle contains it, a handful of
//! other videos containing the word (positives) and videos without it
//! (negatives) are compared window by window against the reference. The window
//! most positives agree on, after negative vetoes, becomes a spotting.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{split_words, Episode, Spotting};
use crate::embedding::{sign_embed, EmbeddingError, FeatureProvider};
use crate::numerics::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum SpottingError {
    #[error("word {word:?} does not occur in the subtitle of {video_id}")]
    WordNotInReference { word: String, video_id: String },
    #[error("unknown video {0}")]
    UnknownVideo(String),
    #[error("word {word:?} has no {kind} exemplars for {video_id}")]
    NoExemplars {
        word: String,
        video_id: String,
        kind: &'static str,
    },
    #[error("spotting file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid spotting parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Maps a lowercased surface word to its dictionary form.
pub trait Lemmatizer {
    fn lemma(&self, word: &str) -> String;
}

/// Leaves words unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityLemmatizer;

impl Lemmatizer for IdentityLemmatizer {
    fn lemma(&self, word: &str) -> String {
        word.to_string()
    }
}

/// A subtitle and the windowed features of its video.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotVideo {
    pub video_id: String,
    pub subtitle_index: u32,
    pub sentence: String,
    /// `[W, D]`
    pub windows: Tensor,
}

/// Windows every sample of the corpus with `provider`.
pub fn spot_videos(
    episodes: &[Episode],
    provider: &dyn FeatureProvider,
    window: usize,
    stride: usize,
) -> Result<Vec<SpotVideo>, SpottingError> {
    let mut out = Vec::new();
    for ep in episodes {
        for s in &ep.samples {
            out.push(SpotVideo {
                video_id: s.features.video_id.clone(),
                subtitle_index: s.subtitle_index,
                sentence: s.target.clone(),
                windows: sign_embed(&s.features, provider, window, stride)?.windows,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub video_id: String,
    pub subtitle_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub word: String,
    /// One per subtitle containing the word, in corpus order.
    pub occurrences: Vec<Occurrence>,
}

fn lemmas(sentence: &str, lemmatizer: &dyn Lemmatizer) -> Vec<String> {
    let mut out: Vec<String> = split_words(sentence)
        .into_iter()
        .filter(|w| w.chars().any(char::is_alphanumeric))
        .map(|w| lemmatizer.lemma(&w))
        .filter(|w| !w.is_empty())
        .collect();
    out.sort();
    out.dedup();
    out
}

/// Lowercased, lemmatized words with at least `min_count` subtitles
/// containing them, in lexicographic order.
pub fn build_vocabulary(videos: &[SpotVideo], lemmatizer: &dyn Lemmatizer, min_count: usize) -> Vec<VocabularyEntry> {
    let mut map: BTreeMap<String, Vec<Occurrence>> = BTreeMap::new();
    for v in videos {
        for w in lemmas(&v.sentence, lemmatizer) {
            map.entry(w).or_default().push(Occurrence {
                video_id: v.video_id.clone(),
                subtitle_index: v.subtitle_index,
            });
        }
    }
    map.into_iter()
        .filter(|(_, occ)| occ.len() >= min_count.max(1))
        .map(|(word, occurrences)| VocabularyEntry { word, occurrences })
        .collect()
}

/// Cosine of the angle between `a` and `b`; 0 when either is the zero vector.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// How negative exemplars suppress a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VetoMode {
    /// Negative votes are subtracted window by window.
    #[default]
    PerWindow,
    /// Windows are ranked by positive votes alone; the word is dropped when the
    /// share of negatives matching anywhere in the reference reaches the share
    /// of positives voting for the chosen window.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpotParams {
    pub positives: usize,
    pub neg_ratio: usize,
    pub threshold: f64,
    pub min_count: usize,
    pub veto: VetoMode,
    pub seed: u64,
}

impl Default for SpotParams {
    fn default() -> Self {
        Self {
            positives: 9,
            neg_ratio: 3,
            threshold: 0.5,
            min_count: 1,
            veto: VetoMode::PerWindow,
            seed: 0,
        }
    }
}

impl SpotParams {
    pub fn validate(&self) -> Result<(), SpottingError> {
        if self.positives == 0 {
            return Err(SpottingError::Params("positives must be at least 1".into()));
        }
        if self.neg_ratio == 0 {
            return Err(SpottingError::Params("neg_ratio must be at least 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(SpottingError::Params("threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpottingRecord {
    pub video_id: String,
    pub gloss: String,
    pub window_index: usize,
    pub score: f64,
    pub vote_count: u32,
}

impl SpottingRecord {
    fn sort_key(&self) -> (&str, usize, &str) {
        (&self.video_id, self.window_index, &self.gloss)
    }
}

/// Exemplar videos drawn for one (word, reference) pair, as indices into the
/// video list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplars {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Requested minus available positives.
    pub positive_shortfall: usize,
    pub negative_shortfall: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for one (word, reference) pair; stable across runs and platforms so
/// the pairs can be processed in any order.
pub fn pair_seed(seed: u64, word: &str, video_id: &str) -> u64 {
    let mut key = Vec::with_capacity(word.len() + video_id.len() + 1);
    key.extend_from_slice(word.as_bytes());
    key.push(0);
    key.extend_from_slice(video_id.as_bytes());
    seed ^ fnv1a(&key)
}

/// Draws up to `params.positives` other videos containing the word and up to
/// `neg_ratio` times as many videos without it.
pub fn sample_exemplars(
    entry: &VocabularyEntry,
    reference: usize,
    videos: &[SpotVideo],
    params: &SpotParams,
) -> Exemplars {
    let index: HashMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.video_id.as_str(), i)).collect();
    let mut contains = vec![false; videos.len()];
    for o in &entry.occurrences {
        if let Some(&i) = index.get(o.video_id.as_str()) {
            contains[i] = true;
        }
    }
    let pos_pool: Vec<usize> = (0..videos.len()).filter(|&i| contains[i] && i != reference).collect();
    let neg_pool: Vec<usize> = (0..videos.len()).filter(|&i| !contains[i]).collect();
    let n_neg = params.positives * params.neg_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(params.seed, &entry.word, &videos[reference].video_id));
    let mut positives: Vec<usize> = pos_pool.choose_multiple(&mut rng, params.positives).copied().collect();
    let mut negatives: Vec<usize> = neg_pool.choose_multiple(&mut rng, n_neg).copied().collect();
    positives.sort_unstable();
    negatives.sort_unstable();
    Exemplars {
        positive_shortfall: params.positives - positives.len(),
        negative_shortfall: n_neg - negatives.len(),
        positives,
        negatives,
    }
}

/// Best similarity between reference window `r` and any exemplar window.
fn best_match(reference: &Tensor, r: usize, exemplar: &Tensor) -> f64 {
    exemplar
        .row_iter()
        .map(|row| cosine_similarity(reference.row(r), row))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub window: usize,
    /// Mean best-match similarity of the positives voting for the window.
    pub score: f64,
    pub votes: u32,
}

/// Smallest vote margin accepted for `positives` exemplars: a majority.
pub fn vote_min(positives: usize) -> usize {
    positives.div_ceil(2).max(1)
}

/// Votes over the reference windows. An exemplar votes for window `r` when its
/// best-matching window has similarity above `threshold`.
pub fn localize(
    reference: &Tensor,
    positives: &[&Tensor],
    negatives: &[&Tensor],
    threshold: f64,
    veto: VetoMode,
) -> Option<Localization> {
    let windows = reference.rows();
    if windows == 0 || positives.is_empty() {
        return None;
    }
    let need = vote_min(positives.len()) as i64;
    let mut best: Option<(i64, usize, Vec<f64>)> = None;
    let mut neg_anywhere = vec![false; negatives.len()];
    for r in 0..windows {
        let sims: Vec<f64> = positives
            .iter()
            .map(|p| best_match(reference, r, p))
            .filter(|&s| s > threshold)
            .collect();
        let mut neg_votes = 0i64;
        for (j, n) in negatives.iter().enumerate() {
            if best_match(reference, r, n) > threshold {
                neg_votes += 1;
                neg_anywhere[j] = true;
            }
        }
        let margin = match veto {
            VetoMode::PerWindow => sims.len() as i64 - neg_votes,
            VetoMode::Global => sims.len() as i64,
        };
        if best.as_ref().is_none_or(|(m, _, _)| margin > *m) {
            best = Some((margin, r, sims));
        }
    }
    let (margin, window, mut sims) = best?;
    if margin < need {
        return None;
    }
    if veto == VetoMode::Global && !negatives.is_empty() {
        let neg_share = neg_anywhere.iter().filter(|&&b| b).count() as f64 / negatives.len() as f64;
        if neg_share >= sims.len() as f64 / positives.len() as f64 {
            return None;
        }
    }
    // Summing in sorted order makes the score independent of exemplar order.
    sims.sort_by(f64::total_cmp);
    let score = sims.iter().sum::<f64>() / sims.len() as f64;
    Some(Localization {
        window,
        score,
        votes: margin as u32,
    })
}

fn video_index(videos: &[SpotVideo], video_id: &str) -> Result<usize, SpottingError> {
    videos
        .iter()
        .position(|v| v.video_id == video_id)
        .ok_or_else(|| SpottingError::UnknownVideo(video_id.to_string()))
}

/// Localizes `entry` in the reference video, or `Ok(None)` when the votes do
/// not single out a window.
pub fn spot_word(
    entry: &VocabularyEntry,
    reference: &str,
    videos: &[SpotVideo],
    params: &SpotParams,
) -> Result<Option<SpottingRecord>, SpottingError> {
    let r = video_index(videos, reference)?;
    if !entry.occurrences.iter().any(|o| o.video_id == reference) {
        return Err(SpottingError::WordNotInReference {
            word: entry.word.clone(),
            video_id: reference.to_string(),
        });
    }
    spot_at(entry, r, videos, params)
}

fn spot_at(
    entry: &VocabularyEntry,
    r: usize,
    videos: &[SpotVideo],
    params: &SpotParams,
) -> Result<Option<SpottingRecord>, SpottingError> {
    let ex = sample_exemplars(entry, r, videos, params);
    let reference = &videos[r];
    for (kind, list) in [("positive", &ex.positives), ("negative", &ex.negatives)] {
        if list.is_empty() {
            return Err(SpottingError::NoExemplars {
                word: entry.word.clone(),
                video_id: reference.video_id.clone(),
                kind,
            });
        }
    }
    if ex.positive_shortfall > 0 || ex.negative_shortfall > 0 {
        log::debug!(
            "{} in {}: {} positives and {} negatives short",
            entry.word,
            reference.video_id,
            ex.positive_shortfall,
            ex.negative_shortfall
        );
    }
    let pos: Vec<&Tensor> = ex.positives.iter().map(|&i| &videos[i].windows).collect();
    let neg: Vec<&Tensor> = ex.negatives.iter().map(|&i| &videos[i].windows).collect();
    Ok(
        localize(&reference.windows, &pos, &neg, params.threshold, params.veto).map(|l| SpottingRecord {
            video_id: reference.video_id.clone(),
            gloss: entry.word.clone(),
            window_index: l.window,
            score: l.score,
            vote_count: l.votes,
        }),
    )
}

/// Spots every vocabulary word in every subtitle containing it. Pairs that
/// cannot be processed are logged and skipped. Records are sorted by
/// (video, window, gloss).
pub fn annotate_corpus(videos: &[SpotVideo], vocabulary: &[VocabularyEntry], params: &SpotParams) -> Vec<SpottingRecord> {
    let index: HashMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.video_id.as_str(), i)).collect();
    let mut out = Vec::new();
    for entry in vocabulary {
        for occ in &entry.occurrences {
            let Some(&r) = index.get(occ.video_id.as_str()) else {
                log::warn!("{}: unknown video {}", entry.word, occ.video_id);
                continue;
            };
            match spot_at(entry, r, videos, params) {
                Ok(Some(rec)) => out.push(rec),
                Ok(None) => {}
                Err(e) => log::debug!("skipping: {e}"),
            }
        }
    }
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    out
}

/// Replaces the spottings of every sample with the records for its video.
pub fn attach_spottings(episodes: &mut [Episode], records: &[SpottingRecord]) {
    let mut by_video: HashMap<&str, Vec<Spotting>> = HashMap::new();
    for r in records {
        by_video.entry(&r.video_id).or_default().push(Spotting {
            gloss: r.gloss.clone(),
            window: r.window_index,
        });
    }
    for ep in episodes {
        for s in &mut ep.samples {
            let mut sp = by_video.remove(s.features.video_id.as_str()).unwrap_or_default();
            sp.sort_by(|a, b| (a.window, &a.gloss).cmp(&(b.window, &b.gloss)));
            s.spottings = sp;
        }
    }
}

/// One `video_id\tgloss\twindow_index\tscore\tvote_count` line per record.
pub fn format_spottings(records: &[SpottingRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.video_id, r.gloss, r.window_index, r.score, r.vote_count
        ));
    }
    s
}

pub fn parse_spottings(text: &str) -> Result<Vec<SpottingRecord>, SpottingError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| SpottingError::Parse { line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(format!("expected 5 tab-separated fields, found {}", cols.len())));
        }
        if cols[0].is_empty() || cols[1].is_empty() {
            return Err(err("empty video id or gloss".into()));
        }
        let window_index = cols[2]
            .parse::<usize>()
            .map_err(|e| err(format!("window index {:?}: {e}", cols[2])))?;
        let score = cols[3]
            .parse::<f64>()
            .map_err(|e| err(format!("score {:?}: {e}", cols[3])))?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [-1, 1]")));
        }
        let vote_count = cols[4]
            .parse::<u32>()
            .map_err(|e| err(format!("vote count {:?}: {e}", cols[4])))?;
        out.push(SpottingRecord {
            video_id: cols[0].to_string(),
            gloss: cols[1].to_string(),
            window_index,
            score,
            vote_count,
        });
    }
    Ok(out)
}

/// Window-level corpus with known sign locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub videos: usize,
    pub vocabulary: usize,
    pub words_per_video: usize,
    pub windows: usize,
    pub dim: usize,
    pub sigma: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            videos: 60,
            vocabulary: 20,
            words_per_video: 3,
            windows: 12,
            dim: 32,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedSign {
    pub video_id: String,
    pub word: String,
    pub window: usize,
}

/// Videos whose windows are random background vectors except where a word's
/// prototype (plus `sigma` noise) is planted. Every subtitle word is planted
/// exactly once.
pub fn planted_corpus(cfg: &PlantedConfig, seed: u64) -> (Vec<SpotVideo>, Vec<PlantedSign>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let prototypes: Vec<Vec<f64>> = (0..cfg.vocabulary).map(|_| gauss(&mut rng, cfg.dim)).collect();
    let words_per_video = cfg.words_per_video.min(cfg.windows).min(cfg.vocabulary);
    let word_ids: Vec<usize> = (0..cfg.vocabulary).collect();
    let window_ids: Vec<usize> = (0..cfg.windows).collect();
    let mut videos = Vec::with_capacity(cfg.videos);
    let mut planted = Vec::new();
    for v in 0..cfg.videos {
        let video_id = format!("v{v:04}");
        let mut data: Vec<f64> = gauss(&mut rng, cfg.windows * cfg.dim);
        let words: Vec<usize> = word_ids.choose_multiple(&mut rng, words_per_video).copied().collect();
        let slots: Vec<usize> = window_ids.choose_multiple(&mut rng, words_per_video).copied().collect();
        for (&w, &slot) in words.iter().zip(&slots) {
            let noise = gauss(&mut rng, cfg.dim);
            for (k, x) in data[slot * cfg.dim..(slot + 1) * cfg.dim].iter_mut().enumerate() {
                *x = prototypes[w][k] + cfg.sigma * noise[k];
            }
            planted.push(PlantedSign {
                video_id: video_id.clone(),
                word: format!("word{w:02}"),
                window: slot,
            });
        }
        let sentence = words.iter().map(|w| format!("word{w:02}")).collect::<Vec<_>>().join(" ");
        videos.push(SpotVideo {
            video_id,
            subtitle_index: v as u32,
            sentence,
            windows: Tensor::new(vec![cfg.windows, cfg.dim], data).expect("shape matches data"),
        });
    }
    (videos, planted)
}

/// Fraction of planted signs with a record at the planted window.
pub fn planted_accuracy(records: &[SpottingRecord], planted: &[PlantedSign]) -> f64 {
    if planted.is_empty() {
        return 1.0;
    }
    let hits = planted
        .iter()
        .filter(|p| {
            records
                .iter()
                .any(|r| r.video_id == p.video_id && r.gloss == p.word && r.window_index == p.window)
        })
        .count();
    hits as f64 / planted.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(id: &str, sentence: &str, rows: &[Vec<f64>]) -> SpotVideo {
        SpotVideo {
            video_id: id.into(),
            subtitle_index: 0,
            sentence: sentence.into(),
            windows: Tensor::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn vocabulary_counts_subtitles() {
        let vids = [video("a", "The cat", &[vec![1.0]]), video("b", "A cat.", &[vec![1.0]])];
        let v = build_vocabulary(&vids, &IdentityLemmatizer, 2);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].word, "cat");
        assert_eq!(v[0].occurrences.len(), 2);
        let words: Vec<_> = build_vocabulary(&vids, &IdentityLemmatizer, 1).into_iter().map(|e| e.word).collect();
        assert_eq!(words, ["a", "cat", "the"]);
        assert!(build_vocabulary(&[], &IdentityLemmatizer, 1).is_empty());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((cosine_similarity(&[3.0, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let recs = vec![SpottingRecord {
            video_id: "ep/1".into(),
            gloss: "cat".into(),
            window_index: 3,
            score: 0.8123456789012345,
            vote_count: 6,
        }];
        assert_eq!(parse_spottings(&format_spottings(&recs)).unwrap(), recs);
        assert!(matches!(parse_spottings("a\tb\t1\t0.5"), Err(SpottingError::Parse { line: 1, .. })));
        assert!(matches!(parse_spottings("\na\tb\t-1\t0.5\t2"), Err(SpottingError::Parse { line: 2, .. })));
        assert!(parse_spottings("a\tb\t1\t1.5\t2").is_err());
    }

    #[test]
    fn word_missing_from_reference_is_an_error() {
        let vids = vec![video("a", "x", &[vec![1.0]]), video("b", "y", &[vec![1.0]])];
        let vocab = build_vocabulary(&vids, &IdentityLemmatizer, 1);
        let y = vocab.iter().find(|e| e.word == "y").unwrap();
        assert!(matches!(
            spot_word(y, "a", &vids, &SpotParams::default()),
            Err(SpottingError::WordNotInReference { .. })
        ));
    }
}
