#![no_main]

use bksieve::estimate::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = ModelConfig::from_json(s);
    }
});
