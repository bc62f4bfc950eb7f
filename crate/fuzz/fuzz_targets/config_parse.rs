//! Run-config parsing from JSON plus override strings: errors are
//! fine, panics are not. The input splits into a JSON body and an
//! override line on the first newline.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nabla_train::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (json, kv) = match text.split_once('\n') {
        Some(pair) => pair,
        None => (text, ""),
    };
    if let Ok(mut cfg) = RunConfig::from_json(json) {
        let _ = cfg.apply_override(kv);
        let _ = cfg.validate();
        // A parsed config must survive the serialization round trip.
        let json = cfg.to_json();
        RunConfig::from_json(&json).expect("re-serialized config failed to parse");
    }
});
