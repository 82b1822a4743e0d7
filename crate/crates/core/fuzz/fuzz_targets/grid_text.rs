#![no_main]

use libfuzzer_sys::fuzz_target;
use metaplast::QuantGrid;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = QuantGrid::parse_text(text) {
        assert_eq!(QuantGrid::parse_text(&grid.to_text()).unwrap(), grid);
        for &q in grid.levels() {
            assert_eq!(grid.project(q).unwrap().value, q);
        }
    }
});
