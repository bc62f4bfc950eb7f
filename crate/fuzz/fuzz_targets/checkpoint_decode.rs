//! The checkpoint decoder must reject arbitrary bytes with an error,
//! never a panic, and anything it accepts must re-encode cleanly.

#![no_main]

use libfuzzer_sys::fuzz_target;
use nabla_train::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        // Accepted input: the round trip must stay decodable.
        let bytes = ckpt.encode();
        Checkpoint::decode(&bytes).expect("re-encoded checkpoint failed to decode");
    }
});
