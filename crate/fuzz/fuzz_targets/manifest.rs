#![no_main]
use ctxslt::corpus::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(episodes) = parse_manifest(data) {
        for ep in episodes {
            std::hint::black_box(ep);
        }
    }
});
