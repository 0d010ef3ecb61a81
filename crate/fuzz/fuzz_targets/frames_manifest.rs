//! Frame manifests arrive from untrusted dataset trees; parsing must never
//! panic, only return structured errors.
#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = sparseview_core::data::parse_frames_manifest(data, std::path::Path::new("fuzz"));
});
