//! Checkpoint manifests: format version gate, config snapshot, RNG state.
#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = sparseview_core::training::parse_checkpoint_manifest(
        data,
        std::path::Path::new("fuzz"),
    );
});
