#![no_main]

use libfuzzer_sys::fuzz_target;
use metaplast::device::LevelSpec;
use metaplast::xbar::derive_grid;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = LevelSpec::parse_text(text) {
        let back = LevelSpec::parse_text(&spec.to_text()).unwrap();
        assert_eq!(back.num_levels(), spec.num_levels());
        let _ = derive_grid(&spec, 1.5);
    }
});
