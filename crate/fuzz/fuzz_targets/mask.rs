#![no_main]

use libfuzzer_sys::fuzz_target;
use pnpt::dataset::decode_mask;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_mask(data, 32) {
        assert_eq!(m.dim(), (32, 32));
    }
});
