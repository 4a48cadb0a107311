#![no_main]

use libfuzzer_sys::fuzz_target;
use pnpt::datagen::Manifest;

fuzz_target!(|data: &[u8]| {
    let _ = Manifest::from_bytes(data);
});
