use std::collections::HashMap;
use std::fs;

use ctxslt::corpus::*;
use ctxslt::numerics::Tensor;
use proptest::prelude::*;

fn small(seed_cfg: impl FnOnce(&mut GeneratorConfig)) -> GeneratorConfig {
    let mut cfg = GeneratorConfig {
        train_episodes: 12,
        dev_episodes: 4,
        test_episodes: 4,
        sentences_per_episode: 6,
        ..GeneratorConfig::default()
    };
    seed_cfg(&mut cfg);
    cfg
}

fn tokenizer_for(episodes: &[Episode]) -> Tokenizer {
    Tokenizer::build(episodes.iter().flat_map(|e| e.samples.iter().map(|s| s.target.as_str())))
}

#[test]
fn save_then_load_reproduces_the_corpus() {
    let corpus = generate_synthetic(&small(|_| {}), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_corpus(&corpus.train, &path).unwrap();
    assert_eq!(load_corpus(&path).unwrap(), corpus.train);
}

#[test]
fn missing_feature_file_is_named() {
    let corpus = generate_synthetic(&small(|_| {}), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    save_corpus(&corpus.train[..1], &path).unwrap();
    let victim = dir.path().join(&corpus.train[0].samples[2].feature_path);
    fs::remove_file(&victim).unwrap();
    match load_corpus(&path) {
        Err(CorpusError::MissingFeatures(p)) => assert_eq!(p, victim),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn written_corpora_are_byte_identical_for_one_seed() {
    let cfg = small(|_| {});
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synthetic(&generate_synthetic(&cfg, 7).unwrap(), a.path()).unwrap();
    write_synthetic(&generate_synthetic(&cfg, 7).unwrap(), b.path()).unwrap();
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl", "ground_truth.jsonl", "generator.json"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let mut files: Vec<_> = fs::read_dir(a.path().join("features")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 20 * 6);
    for f in files {
        let other = b.path().join("features").join(f.file_name().unwrap());
        assert_eq!(fs::read(&f).unwrap(), fs::read(other).unwrap());
    }
}

#[test]
fn context_never_reads_later_samples() {
    let corpus = generate_synthetic(&small(|_| {}), 9).unwrap();
    let tok = tokenizer_for(&corpus.train);
    let modes = [
        ContextMode::Sentences { k: 1 },
        ContextMode::Sentences { k: 3 },
        ContextMode::Spottings { max: 10, lookback: 3 },
    ];
    for ep in &corpus.train {
        for n in 0..ep.samples.len() {
            let mut mutated = ep.clone();
            for s in &mut mutated.samples[n..] {
                s.target = "w0 w0 w0".into();
                s.spottings = vec![Spotting {
                    gloss: "w1".into(),
                    window: 0,
                }];
                s.features.frames = Tensor::zeros(vec![16, 1]);
            }
            for mode in modes {
                assert_eq!(
                    build_context(ep, n, mode, &tok, MAX_CONTEXT_TOKENS),
                    build_context(&mutated, n, mode, &tok, MAX_CONTEXT_TOKENS)
                );
            }
        }
    }
}

#[test]
fn context_examples() {
    let corpus = generate_synthetic(&small(|_| {}), 2).unwrap();
    let tok = tokenizer_for(&corpus.train);
    let ep = &corpus.train[0];
    for mode in [ContextMode::Sentences { k: 2 }, ContextMode::Spottings { max: 10, lookback: 3 }] {
        assert!(build_context(ep, 0, mode, &tok, 64).is_empty());
    }
    let mut want = tok.tokenize(&ep.samples[3].target);
    want.push(SEP);
    want.extend(tok.tokenize(&ep.samples[4].target));
    assert_eq!(build_context(ep, 5, ContextMode::Sentences { k: 2 }, &tok, 1000), want);

    let mut ep = ep.clone();
    for (i, count) in [(2usize, 4usize), (3, 5), (4, 6)] {
        ep.samples[i].spottings = (0..count)
            .map(|j| Spotting {
                gloss: format!("w{}", i * 10 + j),
                window: j,
            })
            .collect();
    }
    let tok = Tokenizer::build(["w20 w21 w22 w23 w30 w31 w32 w33 w34 w40 w41 w42 w43 w44 w45"]);
    let got = build_context(&ep, 5, ContextMode::Spottings { max: 10, lookback: 3 }, &tok, 64);
    let want: Vec<u32> = ["w23", "w30", "w31", "w32", "w33", "w34", "w40", "w41", "w42", "w43", "w44", "w45"][2..]
        .iter()
        .map(|w| tok.id(w))
        .collect();
    assert_eq!(got, want);
}

/// Mean frame of a sign matched to the nearest lexicon prototype.
fn decode_sign(lexicon: &[LexiconSign], frames: &Tensor, start: usize, end: usize) -> usize {
    let mut mean = vec![0.0; frames.cols()];
    for r in start..end {
        for (m, v) in mean.iter_mut().zip(frames.row(r)) {
            *m += v / (end - start) as f64;
        }
    }
    let dist = |p: &[f64]| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..lexicon.len())
        .min_by(|&a, &b| dist(&lexicon[a].prototype).total_cmp(&dist(&lexicon[b].prototype)))
        .unwrap()
}

#[test]
fn noiseless_corpus_without_homonyms_is_decodable_from_video() {
    let cfg = small(|c| {
        c.noise_sigma = 0.0;
        c.homonym_pairs = 0;
        c.spotting_coverage = 1.0;
    });
    let corpus = generate_synthetic(&cfg, 4).unwrap();
    let (mut right, mut total) = (0, 0);
    for split in ["train", "dev", "test"] {
        for ep in corpus.split(split).unwrap() {
            for s in &ep.samples {
                let truth = corpus.truth_for(&ep.episode_id, s.subtitle_index).unwrap();
                assert_eq!(s.spottings.len(), truth.signs.len());
                for sign in &truth.signs {
                    let id = decode_sign(&corpus.lexicon, &s.features.frames, sign.start_frame, sign.end_frame);
                    right += usize::from(corpus.lexicon[id].words[0] == sign.word);
                    total += 1;
                }
            }
        }
    }
    assert_eq!(right, total);
}

#[test]
fn homonyms_are_a_coin_flip_without_context_and_certain_with_it() {
    let cfg = GeneratorConfig {
        train_episodes: 400,
        dev_episodes: 0,
        test_episodes: 0,
        ambiguity_rate: 1.0,
        noise_sigma: 0.0,
        ..GeneratorConfig::default()
    };
    let corpus = generate_synthetic(&cfg, 12).unwrap();
    let topic_of: HashMap<String, usize> = corpus
        .lexicon
        .iter()
        .filter_map(|l| {
            let g = l.gloss.strip_prefix('t')?;
            Some((l.words[0].clone(), g.split('_').next()?.parse().ok()?))
        })
        .collect();
    let mut counts: HashMap<String, HashMap<String, usize>> = HashMap::new();
    let (mut with_context, mut slots) = (0, 0);
    for ep in &corpus.train {
        for (n, s) in ep.samples.iter().enumerate() {
            let truth = corpus.truth_for(&ep.episode_id, s.subtitle_index).unwrap();
            for sign in truth.signs.iter().filter(|x| x.homonym) {
                *counts.entry(sign.gloss.clone()).or_default().entry(sign.word.clone()).or_default() += 1;
                slots += 1;
                // the preceding sentence names the topic
                let topic = ep.samples[n - 1]
                    .target
                    .split(' ')
                    .find_map(|w| topic_of.get(w))
                    .copied()
                    .unwrap();
                let lex = corpus.lexicon.iter().find(|l| l.gloss == sign.gloss).unwrap();
                with_context += usize::from(lex.words[topic % 2] == sign.word);
            }
        }
    }
    let bayes: usize = counts.values().map(|m| *m.values().max().unwrap()).sum();
    let acc = bayes as f64 / slots as f64;
    assert!(slots > 1000);
    assert!((0.5..0.53).contains(&acc), "context-blind accuracy {acc}");
    assert_eq!(with_context, slots);
}

#[test]
fn tokenizer_vocabulary_is_deterministic() {
    let corpus = generate_synthetic(&small(|_| {}), 3).unwrap();
    let a = tokenizer_for(&corpus.train);
    let mut reversed = corpus.train.clone();
    reversed.reverse();
    assert_eq!(a, tokenizer_for(&reversed));
    assert_eq!(&a.tokens()[..SPECIALS.len()], SPECIALS.map(String::from).as_slice());
}

proptest! {
    #[test]
    fn tokenize_round_trips_in_vocabulary_text(words in proptest::collection::vec("[a-z]{1,6}|[,.!?]", 1..12)) {
        let s = words.join(" ");
        let tok = Tokenizer::build([s.as_str()]);
        prop_assert_eq!(tok.detokenize(&tok.tokenize(&s)), s.split_whitespace().collect::<Vec<_>>().join(" "));
        prop_assert!(!tok.tokenize(&s).contains(&UNK));
    }
}
