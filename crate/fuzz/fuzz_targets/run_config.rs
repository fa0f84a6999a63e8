#![no_main]
use ctxslt_cli::config::{parse_flat, RunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(flat) = parse_flat(data) {
        if let Ok(cfg) = RunConfig::default().merge(&flat) {
            let _ = cfg.validate();
            assert_eq!(RunConfig::from_flat(&cfg.to_flat()).expect("flat form reloads"), cfg);
        }
    }
});
