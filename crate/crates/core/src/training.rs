//! Batched teacher-forced training with plateau learning-rate decay keyed to
//! dev BLEU-4, greedy dev evaluation and best-dev checkpointing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_context, split_words, ContextMode, Episode, Tokenizer, TruthRecord, BOS, EOS};
use crate::embedding::{sign_embed, EmbeddingError, MeanPool, WINDOW_SIZE, WINDOW_STRIDE};
use crate::metrics::{evaluate, EvalPair, MetricsError, Scores};
use crate::model::{save_checkpoint, ModelError, ModelInput, Stream, TranslationModel};
use crate::numerics::{Adam, Graph};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; largest parameter norms: {}",
        .norms.iter().map(|(n, v)| format!("{n}={v:.3e}")).collect::<Vec<_>>().join(", ")
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: Vec<(String, f64)>,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Where the context of a dev sample comes from during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Gold preceding sentences and spottings.
    #[default]
    Reference,
    /// The model's own translations of the preceding samples.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub lr_floor: f64,
    /// A dev score counts as an improvement only when it beats the best by
    /// more than this.
    pub improvement_epsilon: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub context: ContextMode,
    pub context_cap: usize,
    pub context_source: ContextSource,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
    /// Generated tokens allowed per sentence at evaluation, EOS included.
    pub max_decode_len: usize,
    /// Evaluate teacher-forced token accuracy on the training set each epoch.
    pub track_train_accuracy: bool,
    /// Stop as soon as train token accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 3e-4,
            batch_size: 16,
            plateau_patience: 5,
            plateau_factor: 0.7,
            lr_floor: 1e-5,
            improvement_epsilon: 0.0,
            max_epochs: 100,
            seed: 0,
            label_smoothing: 0.1,
            context: ContextMode::default(),
            context_cap: crate::corpus::MAX_CONTEXT_TOKENS,
            context_source: ContextSource::Reference,
            clip_norm: None,
            max_decode_len: 40,
            track_train_accuracy: false,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return fail("plateau_factor must lie strictly between 0 and 1");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0 && self.lr_floor.is_finite() && self.lr_floor >= 0.0) {
            return fail("lr0 and lr_floor must be finite and non-negative");
        }
        if self.batch_size == 0 || self.plateau_patience == 0 {
            return fail("batch_size and plateau_patience must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        if self.max_decode_len == 0 {
            return fail("max_decode_len must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return fail("clip_norm must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_bleu1: f64,
    pub dev_bleu4: f64,
    pub dev_rouge_l: f64,
    pub dev_chrf: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_token_accuracy: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub lr: f64,
    pub best_dev_bleu4: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub decays: usize,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            lr: cfg.lr0,
            best_dev_bleu4: f64::NEG_INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            decays: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
        }
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.lr < cfg.lr_floor || self.epoch >= cfg.max_epochs
    }
}

/// Records one dev score. A strict improvement resets the patience counter;
/// `plateau_patience` scores in a row without one multiply the learning rate
/// by `plateau_factor`. Returns whether the score improved.
pub fn plateau_step(state: &mut TrainState, dev_bleu4: f64, cfg: &TrainConfig) -> bool {
    if dev_bleu4 > state.best_dev_bleu4 + cfg.improvement_epsilon || state.best_dev_bleu4 == f64::NEG_INFINITY {
        state.best_dev_bleu4 = dev_bleu4;
        state.epochs_since_improvement = 0;
        return true;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement >= cfg.plateau_patience {
        state.lr *= cfg.plateau_factor;
        state.decays += 1;
        state.epochs_since_improvement = 0;
    }
    false
}

/// A sample turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub episode_id: String,
    pub subtitle_index: u32,
    pub input: ModelInput,
    /// Word ids without BOS or EOS.
    pub target: Vec<u32>,
    pub reference: String,
    /// Target positions holding a homonym sign.
    pub homonym_slots: Vec<usize>,
}

/// Vocabulary of the training targets plus every spotted gloss.
pub fn build_tokenizer(train: &[Episode]) -> Tokenizer {
    let mut texts: Vec<String> = Vec::new();
    for ep in train {
        for s in &ep.samples {
            texts.push(s.target.clone());
            texts.extend(s.spottings.iter().map(|sp| sp.gloss.to_lowercase()));
        }
    }
    Tokenizer::build(texts.iter().map(String::as_str))
}

/// Windows the video, tokenizes the target and precomputes the context of
/// every sample.
pub fn prepare_samples(
    episodes: &[Episode],
    tok: &Tokenizer,
    mode: ContextMode,
    cap: usize,
) -> Result<Vec<PreparedSample>, TrainError> {
    let mut out = Vec::new();
    for ep in episodes {
        for (n, s) in ep.samples.iter().enumerate() {
            let video = sign_embed(&s.features, &MeanPool, WINDOW_SIZE, WINDOW_STRIDE)?.windows;
            let spottings = crate::corpus::gloss_tokens(&s.spottings, tok);
            out.push(PreparedSample {
                episode_id: ep.episode_id.clone(),
                subtitle_index: s.subtitle_index,
                input: ModelInput {
                    video: Some(video),
                    context: build_context(ep, n, mode, tok, cap),
                    spottings,
                },
                target: tok.tokenize(&s.target),
                reference: s.target.clone(),
                homonym_slots: Vec::new(),
            });
        }
    }
    Ok(out)
}

/// Fills `homonym_slots` from generator ground truth, whose signs map one to
/// one onto target words.
pub fn mark_homonyms(samples: &mut [PreparedSample], truth: &[TruthRecord]) {
    for s in samples {
        if let Some(t) = truth
            .iter()
            .find(|t| t.episode_id == s.episode_id && t.subtitle_index == s.subtitle_index)
        {
            if split_words(&s.reference).len() == t.signs.len() {
                s.homonym_slots = t.signs.iter().enumerate().filter(|(_, x)| x.homonym).map(|(i, _)| i).collect();
            }
        }
    }
}

/// Teacher-forced argmax accuracy over target tokens and EOS, plus the same
/// restricted to homonym slots (`None` when there are none).
pub fn token_accuracy(
    model: &TranslationModel,
    samples: &[PreparedSample],
) -> Result<(f64, Option<f64>), TrainError> {
    let (mut right, mut total, mut h_right, mut h_total) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let mut tgt_in = vec![BOS];
        tgt_in.extend_from_slice(&s.target);
        let logits = model.teacher_forced_logits(&s.input, &tgt_in)?;
        for (i, row) in logits.row_iter().enumerate() {
            let gold = s.target.get(i).copied().unwrap_or(EOS);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            let ok = best as u32 == gold;
            right += usize::from(ok);
            total += 1;
            if s.homonym_slots.contains(&i) {
                h_right += usize::from(ok);
                h_total += 1;
            }
        }
    }
    let acc = if total == 0 { 0.0 } else { right as f64 / total as f64 };
    Ok((acc, (h_total > 0).then(|| h_right as f64 / h_total as f64)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DevReport {
    pub scores: Scores,
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

/// Greedy translation of every sample. With [`ContextSource::Predicted`] and
/// sentence context, earlier translations of the same episode replace the
/// gold preceding sentences.
pub fn translate_all(
    model: &TranslationModel,
    samples: &[PreparedSample],
    tok: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<Vec<String>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    let mut history: Vec<String> = Vec::new();
    let mut episode = None;
    for s in samples {
        if episode != Some(&s.episode_id) {
            history.clear();
            episode = Some(&s.episode_id);
        }
        let ids = match (cfg.context_source, cfg.context) {
            (ContextSource::Predicted, ContextMode::Sentences { .. }) => {
                let entries: Vec<crate::corpus::ContextEntry<'_>> = history
                    .iter()
                    .map(|h| crate::corpus::ContextEntry {
                        sentence: h,
                        spottings: &[],
                    })
                    .collect();
                let mut input = s.input.clone();
                input.context = crate::corpus::context_from_history(&entries, cfg.context, tok, cfg.context_cap);
                model.greedy(&model.encode(&input)?, cfg.max_decode_len)?
            }
            _ => model.greedy(&model.encode(&s.input)?, cfg.max_decode_len)?,
        };
        let text = tok.detokenize(&ids);
        history.push(text.clone());
        out.push(text);
    }
    Ok(out)
}

/// Greedy decoding of the dev set scored with every metric.
pub fn evaluate_dev(
    model: &TranslationModel,
    dev: &[PreparedSample],
    tok: &Tokenizer,
    cfg: &TrainConfig,
) -> Result<DevReport, TrainError> {
    let hypotheses = translate_all(model, dev, tok, cfg)?;
    let references: Vec<String> = dev.iter().map(|s| s.reference.clone()).collect();
    let pairs: Vec<EvalPair> = hypotheses
        .iter()
        .zip(&references)
        .map(|(h, r)| EvalPair::new(h.clone(), r.clone()))
        .collect();
    Ok(DevReport {
        scores: evaluate(&pairs)?,
        hypotheses,
        references,
    })
}

/// BLEU-4 of answering every dev sample with a random training sentence.
pub fn chance_bleu4(train: &[PreparedSample], dev: &[PreparedSample], seed: u64) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<EvalPair> = dev
        .iter()
        .map(|d| {
            let pick = train.choose(&mut rng).map(|s| s.reference.clone()).unwrap_or_default();
            EvalPair::new(pick, d.reference.clone())
        })
        .collect();
    Ok(crate::metrics::bleu(&pairs, 4)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters of the epoch with the best dev BLEU-4.
    pub best_model: TranslationModel,
    pub best_report: Option<DevReport>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one translation per line.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<(), TrainError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn check_streams(model: &TranslationModel, samples: &[PreparedSample]) -> Result<(), TrainError> {
    if model.config().streams.contains(Stream::Video) {
        if let Some(s) = samples.iter().find(|s| s.input.video.is_none()) {
            return Err(TrainError::Config(format!(
                "sample {}/{} has no video but the model reads video",
                s.episode_id, s.subtitle_index
            )));
        }
    }
    Ok(())
}

/// Trains `model` in place and returns the final state with the best-dev
/// snapshot. When `run_dir` is given, the epoch log (`train_log.jsonl`), the
/// best checkpoint (`best.ckpt.json`) and its dev translations (`dev.hyp`,
/// `dev.ref`) are written there.
pub fn train(
    model: &mut TranslationModel,
    train_set: &[PreparedSample],
    dev_set: &[PreparedSample],
    tok: &Tokenizer,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    check_streams(model, train_set)?;
    check_streams(model, dev_set)?;
    if train_set.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(io_err(&path))?, path))
        }
        None => None,
    };
    let mut state = TrainState::new(cfg);
    let mut best_model = model.clone();
    let mut best_report = None;
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    while !state.finished(cfg) {
        let epoch = state.epoch + 1;
        order.shuffle(&mut state.rng);
        let (mut loss_sum, mut weight) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<&ModelInput> = chunk.iter().map(|&i| &train_set[i].input).collect();
            let targets: Vec<&[u32]> = chunk.iter().map(|&i| train_set[i].target.as_slice()).collect();
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &inputs, &targets, cfg.label_smoothing, Some(&mut state.rng))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                let mut norms = model.store().value_norms();
                norms.sort_by(|a, b| b.1.total_cmp(&a.1));
                norms.truncate(5);
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    norms,
                });
            }
            loss_sum += value * chunk.len() as f64;
            weight += chunk.len();
            g.backward(loss).map_err(ModelError::from)?;
            let store = model.store_mut();
            store.zero_grad();
            g.accumulate_param_grads(store);
            if let Some(c) = cfg.clip_norm {
                store.clip_grad_norm(c);
            }
            Adam::new(state.lr).step(store).map_err(ModelError::from)?;
        }
        let report = evaluate_dev(model, dev_set, tok, cfg)?;
        let train_token_accuracy = if cfg.track_train_accuracy || cfg.stop_at_train_accuracy.is_some() {
            Some(token_accuracy(model, train_set)?.0)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr: state.lr,
            train_loss: loss_sum / weight as f64,
            dev_bleu1: report.scores.bleu1,
            dev_bleu4: report.scores.bleu4,
            dev_rouge_l: report.scores.rouge_l,
            dev_chrf: report.scores.chrf,
            train_token_accuracy,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} lr {:.3e} loss {:.4} dev bleu4 {:.2}",
            record.lr,
            record.train_loss,
            record.dev_bleu4
        );
        if let Some((file, path)) = log.as_mut() {
            let line = serde_json::to_string(&record).expect("serializable record");
            writeln!(file, "{line}").map_err(io_err(path))?;
        }
        state.history.push(record);
        state.epoch = epoch;
        if plateau_step(&mut state, report.scores.bleu4, cfg) {
            state.best_epoch = Some(epoch);
            best_model = model.clone();
            if let Some(dir) = run_dir {
                save_checkpoint(&dir.join("best.ckpt.json"), model, tok)?;
                write_lines(&dir.join("dev.hyp"), &report.hypotheses)?;
                write_lines(&dir.join("dev.ref"), &report.references)?;
            }
            best_report = Some(report);
        }
        if let (Some(goal), Some(acc)) = (cfg.stop_at_train_accuracy, train_token_accuracy) {
            if acc >= goal {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        state,
        best_model,
        best_report,
    })
}
