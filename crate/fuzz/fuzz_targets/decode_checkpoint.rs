#![no_main]

use ctsr_core::field::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(field) = decode_checkpoint(data) {
        // Anything accepted must survive a round trip.
        let again = decode_checkpoint(&encode_checkpoint(&field)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.len(), field.len());
    }
});
