#![no_main]
use ctxslt::embedding::{format_fmat, parse_fmat};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(m) = parse_fmat(data) {
        let text = format_fmat(&m).expect("parsed matrices are finite");
        assert_eq!(parse_fmat(&text).expect("formatted output parses"), m);
    }
});
