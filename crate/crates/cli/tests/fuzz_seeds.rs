//! The checked-in fuzz corpus seeds must stay valid inputs, otherwise the
//! fuzzers start from rejected data.

use std::fs;
use std::path::PathBuf;

use ctxslt::corpus::{parse_manifest, GeneratorConfig, Tokenizer, UNK};
use ctxslt::embedding::parse_fmat;
use ctxslt::model::parse_checkpoint;
use ctxslt::spotting::parse_spottings;
use ctxslt_cli::config::{parse_flat, RunConfig};

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let text = fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn fmat_seeds_parse() {
    for (p, t) in seeds("fmat") {
        assert!(parse_fmat(&t).is_ok(), "{}", p.display());
    }
}

#[test]
fn manifest_seeds_parse() {
    for (p, t) in seeds("manifest") {
        assert!(parse_manifest(&t).is_ok(), "{}", p.display());
    }
}

#[test]
fn spotting_seeds_parse() {
    for (p, t) in seeds("spottings_tsv") {
        assert!(parse_spottings(&t).is_ok(), "{}", p.display());
    }
}

#[test]
fn checkpoint_seeds_parse() {
    for (p, t) in seeds("checkpoint") {
        assert!(parse_checkpoint(&t).is_ok(), "{}", p.display());
    }
}

#[test]
fn config_seeds_parse() {
    for (p, t) in seeds("run_config") {
        let cfg = RunConfig::default().merge(&parse_flat(&t).unwrap()).unwrap();
        assert!(cfg.validate().is_ok(), "{}", p.display());
    }
    for (p, t) in seeds("generator_config") {
        let cfg: GeneratorConfig = serde_json::from_str(&t).unwrap();
        assert!(cfg.validate().is_ok(), "{}", p.display());
    }
}

#[test]
fn tokenizer_seeds_round_trip() {
    for (_, t) in seeds("tokenizer") {
        assert!(!Tokenizer::build([t.as_str()]).tokenize(&t).contains(&UNK));
    }
}
