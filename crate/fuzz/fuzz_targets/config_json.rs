#![no_main]

use capinstall::config::{ExperimentConfig, Format};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = ExperimentConfig::parse(text, Format::Json) {
            let again = ExperimentConfig::parse(&config.to_json().unwrap(), Format::Json).unwrap();
            assert_eq!(again, config);
        }
    }
});
