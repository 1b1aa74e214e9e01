#![no_main]

use ctsr_core::volume::decode_volume;
use libfuzzer_sys::fuzz_target;

// Input layout: sidecar text, a NUL byte, then the payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(vol) = decode_volume(sidecar, payload) {
        assert_eq!(vol.len() * 4, payload.len());
    }
});
