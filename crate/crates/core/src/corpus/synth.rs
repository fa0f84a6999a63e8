//! Synthetic episodes whose homonym signs can only be resolved by the episode
//! topic announced in earlier sentences.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{save_corpus, CorpusError, Episode, Sample, Spotting};
use crate::embedding::{window_count, FeatureSequence, WINDOW_SIZE, WINDOW_STRIDE};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub train_episodes: usize,
    pub dev_episodes: usize,
    pub test_episodes: usize,
    pub sentences_per_episode: usize,
    pub topics: usize,
    /// Words owned by each topic.
    pub topic_words: usize,
    /// Topic words in every topic sentence.
    pub topic_words_per_sentence: usize,
    pub neutral_words: usize,
    /// Neutral words per sentence, inclusive range.
    pub neutral_per_sentence: [usize; 2],
    pub homonym_pairs: usize,
    /// Probability that a sentence not following a homonym sentence carries a
    /// homonym.
    pub ambiguity_rate: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-occurrence feature noise.
    pub noise_sigma: f64,
    /// Probability that a sign is listed as a spotting.
    pub spotting_coverage: f64,
    /// Sign duration in frames, inclusive range.
    pub sign_frames: [usize; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            train_episodes: 120,
            dev_episodes: 20,
            test_episodes: 20,
            sentences_per_episode: 8,
            topics: 4,
            topic_words: 6,
            topic_words_per_sentence: 2,
            neutral_words: 16,
            neutral_per_sentence: [2, 4],
            homonym_pairs: 4,
            ambiguity_rate: 0.3,
            feature_dim: 16,
            noise_sigma: 0.5,
            spotting_coverage: 0.5,
            sign_frames: [8, 24],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.train_episodes + self.dev_episodes + self.test_episodes == 0 {
            return fail("at least one episode is required");
        }
        if self.sentences_per_episode == 0 {
            return fail("sentences_per_episode must be positive");
        }
        if self.topics == 0 || self.topic_words == 0 || self.neutral_words == 0 {
            return fail("topics, topic_words and neutral_words must be positive");
        }
        if self.topic_words_per_sentence > self.topic_words {
            return fail("topic_words_per_sentence exceeds topic_words");
        }
        let [lo, hi] = self.neutral_per_sentence;
        if lo > hi {
            return fail("neutral_per_sentence range is reversed");
        }
        if self.topic_words_per_sentence + lo == 0 {
            return fail("topic sentences would be empty");
        }
        if self.homonym_pairs > 0 && self.ambiguity_rate > 0.0 && self.topics < 2 {
            return fail("homonyms need at least two topics to be resolvable");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) || !(0.0..=1.0).contains(&self.spotting_coverage) {
            return fail("ambiguity_rate and spotting_coverage must lie in [0, 1]");
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return fail("noise_sigma must be finite and non-negative");
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive");
        }
        let [f_lo, f_hi] = self.sign_frames;
        if f_lo == 0 || f_lo > f_hi {
            return fail("sign_frames must be a positive, ordered range");
        }
        Ok(())
    }
}

/// One visual sign and the target words it can stand for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconSign {
    pub gloss: String,
    /// One word, or two for a homonym pair (indexed by topic parity).
    pub words: Vec<String>,
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSign {
    pub word: String,
    pub gloss: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub window: usize,
    pub homonym: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub split: String,
    pub episode_id: String,
    pub subtitle_index: u32,
    pub topic: usize,
    pub signs: Vec<TruthSign>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub config: GeneratorConfig,
    pub seed: u64,
    pub lexicon: Vec<LexiconSign>,
    pub train: Vec<Episode>,
    pub dev: Vec<Episode>,
    pub test: Vec<Episode>,
    pub truth: Vec<TruthRecord>,
}

impl SyntheticCorpus {
    pub fn split(&self, name: &str) -> Option<&[Episode]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn truth_for(&self, episode_id: &str, subtitle_index: u32) -> Option<&TruthRecord> {
        self.truth
            .iter()
            .find(|t| t.episode_id == episode_id && t.subtitle_index == subtitle_index)
    }
}

/// Window whose span best centres on frames `[start, end)`.
pub fn best_window(start: usize, end: usize, frames: usize) -> usize {
    let w = window_count(frames, WINDOW_SIZE, WINDOW_STRIDE).unwrap_or(1);
    let centre = (start + end) as f64 / 2.0;
    let ideal = (centre - WINDOW_SIZE as f64 / 2.0) / WINDOW_STRIDE as f64;
    (ideal.round().max(0.0) as usize).min(w - 1)
}

struct Inventory {
    neutral: Vec<usize>,
    topical: Vec<Vec<usize>>,
    homonyms: Vec<usize>,
}

fn build_lexicon(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<LexiconSign>, Inventory) {
    let mut lexicon = Vec::new();
    let mut add = |gloss: String, words: Vec<String>, rng: &mut ChaCha8Rng| {
        let prototype = (0..cfg.feature_dim).map(|_| StandardNormal.sample(rng)).collect();
        lexicon.push(LexiconSign { gloss, words, prototype });
        lexicon.len() - 1
    };
    let neutral = (0..cfg.neutral_words)
        .map(|i| add(format!("w{i}"), vec![format!("w{i}")], rng))
        .collect();
    let topical = (0..cfg.topics)
        .map(|t| {
            (0..cfg.topic_words)
                .map(|i| add(format!("t{t}_{i}"), vec![format!("t{t}_{i}")], rng))
                .collect()
        })
        .collect();
    let homonyms = (0..cfg.homonym_pairs)
        .map(|p| add(format!("h{p}"), vec![format!("h{p}a"), format!("h{p}b")], rng))
        .collect();
    (
        lexicon,
        Inventory {
            neutral,
            topical,
            homonyms,
        },
    )
}

struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    lexicon: &'a [LexiconSign],
    inv: &'a Inventory,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Generator<'_> {
    /// Sign ids of one sentence plus the homonym flag per sign.
    fn sentence(&mut self, topic: usize, homonym: bool) -> Vec<(usize, bool)> {
        let [lo, hi] = self.cfg.neutral_per_sentence;
        let n_neutral = self.rng.random_range(lo..=hi);
        let mut signs: Vec<(usize, bool)> = (0..n_neutral)
            .map(|_| (*self.inv.neutral.choose(&mut self.rng).expect("non-empty"), false))
            .collect();
        if homonym {
            let h = *self.inv.homonyms.choose(&mut self.rng).expect("non-empty");
            let at = self.rng.random_range(0..=signs.len());
            signs.insert(at, (h, true));
        } else {
            let picked = self.inv.topical[topic].choose_multiple(&mut self.rng, self.cfg.topic_words_per_sentence);
            signs.extend(picked.map(|&s| (s, false)));
            signs.shuffle(&mut self.rng);
        }
        signs
    }

    fn render(&mut self, signs: &[(usize, bool)], topic: usize) -> (Tensor, Vec<TruthSign>) {
        let [lo, hi] = self.cfg.sign_frames;
        let mut durations: Vec<usize> = signs.iter().map(|_| self.rng.random_range(lo..=hi)).collect();
        let total: usize = durations.iter().sum();
        if total < WINDOW_SIZE {
            *durations.last_mut().expect("non-empty sentence") += WINDOW_SIZE - total;
        }
        let frames: usize = durations.iter().sum();
        let f = self.cfg.feature_dim;
        let mut data = Vec::with_capacity(frames * f);
        let mut truth = Vec::with_capacity(signs.len());
        let mut start = 0;
        for (&(sign, homonym), &dur) in signs.iter().zip(&durations) {
            let entry = &self.lexicon[sign];
            let noisy: Vec<f64> = entry
                .prototype
                .iter()
                .map(|p| p + self.noise.sample(&mut self.rng))
                .collect();
            for _ in 0..dur {
                data.extend_from_slice(&noisy);
            }
            let word = if homonym {
                entry.words[topic % 2].clone()
            } else {
                entry.words[0].clone()
            };
            truth.push(TruthSign {
                word,
                gloss: entry.gloss.clone(),
                start_frame: start,
                end_frame: start + dur,
                window: best_window(start, start + dur, frames),
                homonym,
            });
            start += dur;
        }
        (Tensor::new(vec![frames, f], data).expect("sized above"), truth)
    }

    fn episode(&mut self, split: &str, index: usize, topic: usize, truth: &mut Vec<TruthRecord>) -> Episode {
        let episode_id = format!("{split}-{index:04}");
        let can_hom = self.cfg.homonym_pairs > 0;
        let mut samples = Vec::with_capacity(self.cfg.sentences_per_episode);
        let mut prev_homonym = true;
        for n in 0..self.cfg.sentences_per_episode {
            let homonym = can_hom && !prev_homonym && self.rng.random_bool(self.cfg.ambiguity_rate);
            prev_homonym = homonym;
            let signs = self.sentence(topic, homonym);
            let (frames, signs_truth) = self.render(&signs, topic);
            let spottings = signs_truth
                .iter()
                .filter(|_| self.rng.random_bool(self.cfg.spotting_coverage))
                .map(|s| Spotting {
                    gloss: s.gloss.clone(),
                    window: s.window,
                })
                .collect();
            let target = signs_truth.iter().map(|s| s.word.as_str()).collect::<Vec<_>>().join(" ");
            let feature_path = format!("features/{episode_id}_{n:03}.fmat");
            let video_id = format!("{episode_id}/{n}");
            samples.push(Sample {
                subtitle_index: n as u32,
                feature_path,
                features: FeatureSequence::new(video_id, frames),
                target,
                spottings,
            });
            truth.push(TruthRecord {
                split: split.to_string(),
                episode_id: episode_id.clone(),
                subtitle_index: n as u32,
                topic,
                signs: signs_truth,
            });
        }
        Episode { episode_id, samples }
    }

    fn split(&mut self, name: &str, count: usize, truth: &mut Vec<TruthRecord>) -> Vec<Episode> {
        let mut topics: Vec<usize> = (0..count).map(|i| i % self.cfg.topics).collect();
        topics.shuffle(&mut self.rng);
        topics
            .into_iter()
            .enumerate()
            .map(|(i, t)| self.episode(name, i, t, truth))
            .collect()
    }
}

/// Generates the corpus in memory. The same config and seed always give the
/// same corpus.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticCorpus, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lexicon, inv) = build_lexicon(cfg, &mut rng);
    let mut gen = Generator {
        cfg,
        lexicon: &lexicon,
        inv: &inv,
        rng,
        noise: Normal::new(0.0, cfg.noise_sigma).map_err(|e| CorpusError::Config(e.to_string()))?,
    };
    let mut truth = Vec::new();
    let train = gen.split("train", cfg.train_episodes, &mut truth);
    let dev = gen.split("dev", cfg.dev_episodes, &mut truth);
    let test = gen.split("test", cfg.test_episodes, &mut truth);
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        seed,
        lexicon,
        train,
        dev,
        test,
        truth,
    })
}

#[derive(Serialize)]
struct GeneratorRecord<'a> {
    seed: u64,
    config: &'a GeneratorConfig,
    lexicon: &'a [LexiconSign],
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl`, `ground_truth.jsonl`,
/// `generator.json` and the `features/` directory under `dir`.
pub fn write_synthetic(corpus: &SyntheticCorpus, dir: &Path) -> Result<(), CorpusError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for name in ["train", "dev", "test"] {
        save_corpus(corpus.split(name).expect("known split"), &dir.join(format!("{name}.jsonl")))?;
    }
    let mut truth = String::new();
    for t in &corpus.truth {
        truth.push_str(&serde_json::to_string(t).expect("serializable"));
        truth.push('\n');
    }
    let path = dir.join("ground_truth.jsonl");
    fs::write(&path, truth).map_err(io(&path))?;
    let record = GeneratorRecord {
        seed: corpus.seed,
        config: &corpus.config,
        lexicon: &corpus.lexicon,
    };
    let path = dir.join("generator.json");
    fs::write(&path, serde_json::to_string_pretty(&record).expect("serializable")).map_err(io(&path))
}
