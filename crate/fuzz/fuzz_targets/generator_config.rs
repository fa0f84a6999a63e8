#![no_main]
use ctxslt::corpus::GeneratorConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = serde_json::from_str::<GeneratorConfig>(data) {
        let _ = cfg.validate();
    }
});
