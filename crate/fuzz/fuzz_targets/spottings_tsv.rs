#![no_main]
use ctxslt::spotting::{format_spottings, parse_spottings};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(records) = parse_spottings(data) {
        let again = parse_spottings(&format_spottings(&records)).expect("formatted output parses");
        assert_eq!(again, records);
    }
});
