//! Run configuration files (--config) including validation.
#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = sparseview_core::config::parse_run_config(data, std::path::Path::new("fuzz"));
});
