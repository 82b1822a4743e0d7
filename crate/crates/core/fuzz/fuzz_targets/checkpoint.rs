#![no_main]

use libfuzzer_sys::fuzz_target;
use metaplast::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // accepted input must survive a re-encode unchanged
        assert_eq!(ck.encode(), data);
    }
});
