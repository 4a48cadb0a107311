#![no_main]

use libfuzzer_sys::fuzz_target;
use pnpt::training::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let _ = c.model();
    }
});
