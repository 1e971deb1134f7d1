#![no_main]

use libfuzzer_sys::fuzz_target;
use segbench_cli::config::{parse_config, ExperimentConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = parse_config(text) {
        if let Ok(cfg) = ExperimentConfig::from_doc(&doc) {
            let _ = cfg.validate_for_execution();
        }
    }
});
