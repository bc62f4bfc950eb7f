//! Class-label parsing accepts indices, full names, and short codes;
//! anything else must come back as a clean error.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nabla_train::data::parse_class_label;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_class_label(text);
    }
});
