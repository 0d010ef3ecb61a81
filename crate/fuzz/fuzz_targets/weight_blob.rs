//! Binary weight blobs read back from checkpoints.
#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = sparseview_autodiff::ParamStore::from_blob(data);
});
