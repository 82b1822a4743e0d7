#![no_main]

use libfuzzer_sys::fuzz_target;
use metaplast::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = ExperimentConfig::from_toml(text) {
        assert_eq!(ExperimentConfig::from_toml(&config.to_toml()).unwrap(), config);
    }
});
