#![no_main]
use ctxslt::model::parse_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = parse_checkpoint(data);
});
