#![no_main]

use libfuzzer_sys::fuzz_target;
use pnpt::pool::NormalityPool;

fuzz_target!(|data: &[u8]| {
    let _ = NormalityPool::from_bytes(data);
});
