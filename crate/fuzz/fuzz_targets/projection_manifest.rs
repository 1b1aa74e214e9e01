#![no_main]

use ctsr_core::projector::ProjectionManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = ProjectionManifest::parse(text);
});
