//! Synthetic scene specifications fed to the `synth` command.
#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = sparseview_core::data::parse_scene_spec(data, std::path::Path::new("fuzz"));
});
