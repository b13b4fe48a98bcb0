#![no_main]

use libfuzzer_sys::fuzz_target;
use lagphylo::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ExperimentConfig::from_toml_str(text);
});
