#![no_main]

use libfuzzer_sys::fuzz_target;
use pnpt::archive::TensorArchive;

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = TensorArchive::from_bytes(data) {
        // anything accepted must survive a re-encode unchanged
        let again = TensorArchive::from_bytes(&a.to_bytes()).expect("re-encoded archive parses");
        assert_eq!(again.to_bytes(), a.to_bytes());
    }
});
