#![no_main]

use libfuzzer_sys::fuzz_target;
use metaplast::device::{parse_dump, write_dump};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_dump(text) {
        let mut out = Vec::new();
        write_dump(&mut out, records.iter().cloned()).unwrap();
        let again = parse_dump(std::str::from_utf8(&out).unwrap()).unwrap();
        assert_eq!(again.len(), records.len());
    }
});
