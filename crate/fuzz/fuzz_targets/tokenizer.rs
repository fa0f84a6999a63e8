#![no_main]
use ctxslt::corpus::{split_words, Tokenizer, UNK};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let words = split_words(data);
    let tok = Tokenizer::build([data]);
    let ids = tok.tokenize(data);
    assert_eq!(ids.len(), words.len());
    assert!(!ids.contains(&UNK));
    let _ = Tokenizer::from_tokens(words);
});
