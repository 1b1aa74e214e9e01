#![no_main]

use ctsr_core::ddnm::{decode_request, decode_response, read_frame};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut reader = data;
    // Both frame kinds travel the same way; try each decoder on every body.
    while let Ok(Some(body)) = read_frame(&mut reader) {
        if let Ok((_, [nu, nv], values)) = decode_request(&body) {
            assert_eq!(values.len(), nu * nv);
        }
        let _ = decode_response(&body, body.len() / 4);
    }
});
