#![no_main]

use ctsr_cli::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::parse(text) {
        let _ = cfg.validate();
        let _ = cfg.to_toml();
    }
});
