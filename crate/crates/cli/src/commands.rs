use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ctxslt::corpus::{
    generate_synthetic, load_corpus, split_words, write_synthetic, ContextEntry, ContextMode, Episode, Tokenizer,
    TruthRecord,
};
use ctxslt::embedding::{read_fmat, sign_embed, FeatureSequence, MeanPool, WINDOW_SIZE, WINDOW_STRIDE};
use ctxslt::metrics::{evaluate, EvalPair, Scores};
use ctxslt::model::{load_checkpoint, ModelInput, StreamSet, TranslationModel};
use ctxslt::spotting::{
    annotate_corpus, attach_spottings, build_vocabulary, format_spottings, parse_spottings, spot_videos,
    IdentityLemmatizer, SpottingRecord,
};
use ctxslt::training::{
    build_tokenizer, chance_bleu4, evaluate_dev, mark_homonyms, prepare_samples, token_accuracy, train, write_lines,
    ContextSource, PreparedSample, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// Train, dev and test episodes with generator ground truth when known.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Episode>,
    pub dev: Vec<Episode>,
    pub test: Vec<Episode>,
    pub truth: Vec<TruthRecord>,
}

impl Splits {
    pub fn all(&self) -> Vec<Episode> {
        let mut v = self.train.clone();
        v.extend(self.dev.iter().cloned());
        v.extend(self.test.iter().cloned());
        v
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn read_truth(path: &Path) -> Result<Vec<TruthRecord>, CliError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Input(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads `corpus.dir` or generates a corpus from `generator.*`, then applies
/// `corpus.spottings` when set.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits, CliError> {
    let mut splits = match &cfg.corpus.dir {
        Some(dir) => {
            let split = |name: &str| -> Result<Vec<Episode>, CliError> {
                let path = dir.join(format!("{name}.jsonl"));
                if name == "test" && !path.exists() {
                    return Ok(Vec::new());
                }
                Ok(load_corpus(&path)?)
            };
            Splits {
                train: split("train")?,
                dev: split("dev")?,
                test: split("test")?,
                truth: read_truth(&dir.join("ground_truth.jsonl"))?,
            }
        }
        None => {
            let c = generate_synthetic(&cfg.generator, cfg.seed)?;
            Splits {
                train: c.train,
                dev: c.dev,
                test: c.test,
                truth: c.truth,
            }
        }
    };
    if let Some(path) = &cfg.corpus.spottings {
        let records = parse_spottings(&read_text(path)?)?;
        for split in [&mut splits.train, &mut splits.dev, &mut splits.test] {
            attach_spottings(split, &records);
        }
    }
    Ok(splits)
}

/// Generates the synthetic corpus into `out` with the resolved config.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let corpus = generate_synthetic(&cfg.generator, cfg.seed)?;
    write_synthetic(&corpus, out)?;
    cfg.write(&out.join("resolved_config.json"))
}

/// Annotates every split with the voting spotter and writes `spottings.tsv`.
pub fn spot(cfg: &RunConfig, out: &Path) -> Result<Vec<SpottingRecord>, CliError> {
    create_dir(out)?;
    cfg.write(&out.join("resolved_config.json"))?;
    let splits = load_splits(cfg)?;
    let videos = spot_videos(&splits.all(), &MeanPool, WINDOW_SIZE, WINDOW_STRIDE)?;
    let vocab = build_vocabulary(&videos, &IdentityLemmatizer, cfg.spotting.min_count);
    let records = annotate_corpus(&videos, &vocab, &cfg.spotting);
    write_text(&out.join("spottings.tsv"), &format_spottings(&records))?;
    Ok(records)
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub streams: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub decays: usize,
    pub final_lr: f64,
    pub dev: Option<Scores>,
    /// Dev scores of the best model with gold and with self-predicted
    /// preceding sentences; empty unless the model reads sentence context.
    pub dev_by_context_source: BTreeMap<String, Scores>,
    pub dev_token_accuracy: f64,
    pub dev_homonym_accuracy: Option<f64>,
    pub test: Option<Scores>,
    pub test_homonym_accuracy: Option<f64>,
    pub train_token_accuracy: Option<f64>,
    pub chance_bleu4: f64,
}

fn prepared(
    episodes: &[Episode],
    truth: &[TruthRecord],
    tok: &Tokenizer,
    cfg: &RunConfig,
) -> Result<Vec<PreparedSample>, CliError> {
    let mut samples = prepare_samples(episodes, tok, cfg.train.context, cfg.train.context_cap)?;
    mark_homonyms(&mut samples, truth);
    Ok(samples)
}

/// Trains one model in `run_dir`: resolved config, epoch log, best
/// checkpoint, dev and test translations and `metrics.json`.
pub fn train_run(cfg: &RunConfig, run_dir: &Path) -> Result<RunMetrics, CliError> {
    create_dir(run_dir)?;
    cfg.write(&run_dir.join("resolved_config.json"))?;
    let splits = load_splits(cfg)?;
    let tok = build_tokenizer(&splits.train);
    let train_set = prepared(&splits.train, &splits.truth, &tok, cfg)?;
    let dev_set = prepared(&splits.dev, &splits.truth, &tok, cfg)?;
    let test_set = prepared(&splits.test, &splits.truth, &tok, cfg)?;
    let feature_dim = train_set
        .iter()
        .find_map(|s| s.input.video.as_ref().map(|v| v.cols()))
        .ok_or_else(|| CliError::Input("training split is empty".into()))?;
    let mut model = TranslationModel::new(cfg.model.resolve(tok.len(), feature_dim), cfg.seed)?;
    let outcome = train(&mut model, &train_set, &dev_set, &tok, &cfg.train, Some(run_dir))?;
    let best = &outcome.best_model;
    let (dev_token_accuracy, dev_homonym_accuracy) = token_accuracy(best, &dev_set)?;
    let mut dev_by_context_source = BTreeMap::new();
    if cfg.model.streams.context && matches!(cfg.train.context, ContextMode::Sentences { .. }) {
        for (name, source) in [("reference", ContextSource::Reference), ("predicted", ContextSource::Predicted)] {
            let tc = TrainConfig {
                context_source: source,
                ..cfg.train.clone()
            };
            dev_by_context_source.insert(name.to_string(), evaluate_dev(best, &dev_set, &tok, &tc)?.scores);
        }
    }
    let (test, test_homonym_accuracy) = if test_set.is_empty() {
        (None, None)
    } else {
        let report = evaluate_dev(best, &test_set, &tok, &cfg.train)?;
        write_lines(&run_dir.join("test.hyp"), &report.hypotheses)?;
        write_lines(&run_dir.join("test.ref"), &report.references)?;
        (Some(report.scores), token_accuracy(best, &test_set)?.1)
    };
    let metrics = RunMetrics {
        streams: cfg.model.streams.label(),
        seed: cfg.seed,
        epochs: outcome.state.epoch,
        best_epoch: outcome.state.best_epoch,
        decays: outcome.state.decays,
        final_lr: outcome.state.lr,
        dev: outcome.best_report.map(|r| r.scores),
        dev_by_context_source,
        dev_token_accuracy,
        dev_homonym_accuracy,
        test,
        test_homonym_accuracy,
        train_token_accuracy: outcome.state.history.last().and_then(|r| r.train_token_accuracy),
        chance_bleu4: chance_bleu4(&train_set, &dev_set, cfg.seed)?,
    };
    let text = serde_json::to_string_pretty(&metrics).expect("serializable metrics");
    write_text(&run_dir.join("metrics.json"), &(text + "\n"))?;
    Ok(metrics)
}

/// Decoding options shared by the translate modes.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    /// 1 selects greedy search.
    pub beam: usize,
    pub max_len: usize,
}

fn decode(model: &TranslationModel, input: &ModelInput, opts: DecodeOptions) -> Result<Vec<u32>, CliError> {
    let encoded = model.encode(input)?;
    Ok(if opts.beam <= 1 {
        model.greedy(&encoded, opts.max_len)?
    } else {
        model.beam(&encoded, opts.beam, opts.max_len)?
    })
}

/// Translates a single feature file. `context` is a preceding sentence (or
/// several joined by the caller); `spottings` is a whitespace-separated gloss
/// list in temporal order.
pub fn translate_one(
    checkpoint: &Path,
    features: &Path,
    context: Option<&str>,
    spottings: Option<&str>,
    opts: DecodeOptions,
) -> Result<String, CliError> {
    let (model, tok) = load_checkpoint(checkpoint)?;
    let frames = read_fmat(features)?;
    let seq = FeatureSequence::new(features.display().to_string(), frames);
    let video = sign_embed(&seq, &MeanPool, WINDOW_SIZE, WINDOW_STRIDE)?.windows;
    let input = ModelInput {
        video: Some(video),
        context: context.map(|c| tok.tokenize(c)).unwrap_or_default(),
        spottings: spottings
            .map(|s| split_words(s).iter().map(|g| tok.id(&g.to_lowercase())).collect())
            .unwrap_or_default(),
    };
    Ok(tok.detokenize(&decode(&model, &input, opts)?))
}

/// Translates every sample of a manifest in order. With `predicted`, the
/// sentence context is built from earlier outputs instead of the gold
/// subtitles.
pub fn translate_manifest(
    checkpoint: &Path,
    manifest: &Path,
    mode: ContextMode,
    cap: usize,
    predicted: bool,
    opts: DecodeOptions,
) -> Result<Vec<String>, CliError> {
    let (model, tok) = load_checkpoint(checkpoint)?;
    let episodes = load_corpus(manifest)?;
    let samples = prepare_samples(&episodes, &tok, mode, cap)?;
    let mut out = Vec::with_capacity(samples.len());
    let mut k = 0;
    for ep in &episodes {
        let mut history: Vec<String> = Vec::new();
        for n in 0..ep.samples.len() {
            let mut input = samples[k].input.clone();
            k += 1;
            if predicted {
                let entries: Vec<ContextEntry<'_>> = history
                    .iter()
                    .zip(&ep.samples[..n])
                    .map(|(h, s)| ContextEntry {
                        sentence: h,
                        spottings: &s.spottings,
                    })
                    .collect();
                input.context = ctxslt::corpus::context_from_history(&entries, mode, &tok, cap);
            }
            let text = tok.detokenize(&decode(&model, &input, opts)?);
            history.push(text.clone());
            out.push(text);
        }
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

/// Corpus metrics of line-aligned hypothesis and reference files; optionally
/// writes per-pair scores as TSV.
pub fn evaluate_files(hyp: &Path, reference: &Path, pairs_tsv: Option<&Path>) -> Result<Scores, CliError> {
    let (h, r) = (read_lines(hyp)?, read_lines(reference)?);
    if h.len() != r.len() {
        return Err(CliError::Input(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        )));
    }
    let pairs: Vec<EvalPair> = h.iter().zip(&r).map(|(a, b)| EvalPair::new(a.clone(), b.clone())).collect();
    let scores = evaluate(&pairs)?;
    if let Some(path) = pairs_tsv {
        let mut text = String::from("index\tbleu1\tbleu4\trougeL\tchrf\n");
        for (i, p) in pairs.iter().enumerate() {
            let s = evaluate(std::slice::from_ref(p))?;
            text.push_str(&format!("{i}\t{}\t{}\t{}\t{}\n", s.bleu1, s.bleu4, s.rouge_l, s.chrf));
        }
        write_text(path, &text)?;
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub streams: String,
    pub runs: Vec<RunMetrics>,
    pub mean_dev_bleu1: f64,
    pub mean_dev_bleu4: f64,
    pub mean_dev_rouge_l: f64,
    pub mean_dev_chrf: f64,
    pub mean_dev_homonym_accuracy: Option<f64>,
    /// Dev BLEU-4 with the model's own earlier translations as context.
    pub mean_dev_bleu4_predicted_context: Option<f64>,
    pub mean_test_bleu4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub mean_chance_bleu4: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    if v.iter().all(Option::is_some) && !v.is_empty() {
        Some(mean(v.iter().flatten().copied()))
    } else {
        None
    }
}

/// Directory name of an ablation run.
pub fn run_name(streams: StreamSet, seed: u64) -> PathBuf {
    PathBuf::from(streams.label().replace('+', "_")).join(format!("seed{seed}"))
}

/// Trains every stream subset for every seed of `ablation.seeds`.
pub fn ablate(cfg: &RunConfig, run_dir: &Path) -> Result<AblationReport, CliError> {
    create_dir(run_dir)?;
    cfg.write(&run_dir.join("resolved_config.json"))?;
    let mut rows = Vec::new();
    let mut chance = Vec::new();
    for streams in StreamSet::ABLATION_ROWS {
        let mut runs = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            c.train.seed = seed;
            c.model.streams = streams;
            log::info!("ablation {} seed {seed}", streams.label());
            let m = train_run(&c, &run_dir.join(run_name(streams, seed)))?;
            if rows.is_empty() {
                chance.push(m.chance_bleu4);
            }
            runs.push(m);
        }
        let dev = |f: fn(&Scores) -> f64| mean(runs.iter().filter_map(|r| r.dev.as_ref().map(f)));
        let test_bleu: Vec<Option<f64>> = runs.iter().map(|r| r.test.as_ref().map(|s| s.bleu4)).collect();
        let predicted: Vec<Option<f64>> = runs
            .iter()
            .map(|r| r.dev_by_context_source.get("predicted").map(|s| s.bleu4))
            .collect();
        let hom: Vec<Option<f64>> = runs.iter().map(|r| r.dev_homonym_accuracy).collect();
        rows.push(AblationRow {
            streams: streams.label(),
            mean_dev_bleu1: dev(|s| s.bleu1),
            mean_dev_bleu4: dev(|s| s.bleu4),
            mean_dev_rouge_l: dev(|s| s.rouge_l),
            mean_dev_chrf: dev(|s| s.chrf),
            mean_dev_homonym_accuracy: mean_opt(&hom),
            mean_dev_bleu4_predicted_context: mean_opt(&predicted),
            mean_test_bleu4: mean_opt(&test_bleu),
            runs,
        });
    }
    let report = AblationReport {
        seeds: cfg.ablation.seeds.clone(),
        rows,
        mean_chance_bleu4: mean(chance.into_iter()),
    };
    let json = serde_json::to_string_pretty(&report).expect("serializable report");
    write_text(&run_dir.join("ablation.json"), &(json + "\n"))?;
    write_text(&run_dir.join("ablation.md"), &ablation_markdown(&report))?;
    Ok(report)
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map(|x| format!("{:.2}", x * scale)).unwrap_or_else(|| "-".into())
}

/// Dev-set means over seeds, one row per stream subset.
pub fn ablation_markdown(report: &AblationReport) -> String {
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let mut s = format!("Dev means over seeds {}\n\n", seeds.join(", "));
    s.push_str("| Streams | BLEU-1 | BLEU-4 | ROUGE-L | chrF | Homonym acc. (%) | BLEU-4, predicted context | Test BLEU-4 |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in &report.rows {
        s.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {} | {} | {} |\n",
            r.streams,
            r.mean_dev_bleu1,
            r.mean_dev_bleu4,
            r.mean_dev_rouge_l,
            r.mean_dev_chrf,
            fmt_opt(r.mean_dev_homonym_accuracy, 100.0),
            fmt_opt(r.mean_dev_bleu4_predicted_context, 1.0),
            fmt_opt(r.mean_test_bleu4, 1.0),
        ));
    }
    s.push_str(&format!("\nChance BLEU-4 (random training sentence): {:.2}\n", report.mean_chance_bleu4));
    s
}
