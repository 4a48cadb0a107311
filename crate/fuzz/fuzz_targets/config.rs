#![no_main]

use libfuzzer_sys::fuzz_target;
use pnpt::config::{parse_override, Config};

// Whole input as a TOML file, then every line as a `--set` override.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = Config::from_toml_str(text);
    let lines: Vec<String> = text.lines().map(str::to_string).collect();
    for l in &lines {
        let _ = parse_override(l);
    }
    if let Ok(c) = Config::from_toml_with_overrides("", &lines) {
        let _ = c.train_hash();
        let _ = Config::from_toml_str(&c.to_toml_string()).expect("serialized config parses");
    }
});
