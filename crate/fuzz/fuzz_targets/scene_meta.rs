//! Scene sidecar metadata (class name, split, depth bounds).
#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = sparseview_core::data::parse_scene_meta(data, std::path::Path::new("fuzz"));
});
