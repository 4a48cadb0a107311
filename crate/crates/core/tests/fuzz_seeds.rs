//! Replays the checked-in fuzz corpus, plus simple mutations of it, through
//! every decoder. Nothing may panic; rejects must come back as errors.

use std::fs;
use std::path::PathBuf;

use pnpt::archive::TensorArchive;
use pnpt::config::{parse_override, Config};
use pnpt::datagen::Manifest;
use pnpt::dataset::decode_mask;
use pnpt::pool::NormalityPool;
use pnpt::training::Checkpoint;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// The seed itself, truncations, single bit flips and a few byte splats.
fn mutations(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec(), Vec::new()];
    let n = seed.len();
    let step = (n / 48).max(1);
    for cut in (0..n).step_by(step).chain([n.saturating_sub(1)]) {
        out.push(seed[..cut].to_vec());
    }
    for (i, pos) in (0..n).step_by(step).enumerate() {
        let mut m = seed.to_vec();
        m[pos] ^= 1 << (i % 8);
        out.push(m);
        let mut m = seed.to_vec();
        m[pos] = [0x00, 0xff, 0x7f, 0x80][i % 4];
        out.push(m);
    }
    // header region gets every bit
    for pos in 0..n.min(24) {
        for bit in 0..8 {
            let mut m = seed.to_vec();
            m[pos] ^= 1 << bit;
            out.push(m);
        }
    }
    let mut doubled = seed.to_vec();
    doubled.extend_from_slice(seed);
    out.push(doubled);
    out
}

fn replay(target: &str, run: impl Fn(&[u8])) -> usize {
    let mut count = 0;
    for (name, seed) in corpus(target) {
        for (i, m) in mutations(&seed).iter().enumerate() {
            let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(m)));
            assert!(r.is_ok(), "{target}/{name} mutation {i} panicked");
            count += 1;
        }
    }
    count
}

#[test]
fn archive_seeds() {
    for (name, seed) in corpus("archive") {
        let a = TensorArchive::from_bytes(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(a.to_bytes(), seed, "{name}");
    }
    replay("archive", |d| {
        if let Ok(a) = TensorArchive::from_bytes(d) {
            let again = TensorArchive::from_bytes(&a.to_bytes()).unwrap();
            assert_eq!(again.to_bytes(), a.to_bytes());
        }
    });
}

#[test]
fn pool_seeds() {
    for (name, seed) in corpus("pool") {
        let p = NormalityPool::from_bytes(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(p.to_archive().to_bytes(), seed, "{name}");
    }
    replay("pool", |d| {
        if let Ok(p) = NormalityPool::from_bytes(d) {
            if let Some(c) = p.prototype_codings.first() {
                let _ = p.nearest(c);
            }
        }
    });
}

#[test]
fn checkpoint_seeds() {
    for (name, seed) in corpus("checkpoint") {
        let c = Checkpoint::from_bytes(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
        c.model().unwrap();
        assert_eq!(c.to_bytes(), seed, "{name}");
    }
    replay("checkpoint", |d| {
        if let Ok(c) = Checkpoint::from_bytes(d) {
            let _ = c.model();
        }
    });
}

#[test]
fn config_seeds() {
    for (name, seed) in corpus("config") {
        let text = String::from_utf8(seed).unwrap();
        if name.starts_with("overrides") {
            let lines: Vec<String> = text.lines().map(str::to_string).collect();
            Config::from_toml_with_overrides("", &lines).unwrap_or_else(|e| panic!("{name}: {e}"));
        } else {
            Config::from_toml_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
    replay("config", |d| {
        let Ok(text) = std::str::from_utf8(d) else {
            return;
        };
        let _ = Config::from_toml_str(text);
        let lines: Vec<String> = text.lines().map(str::to_string).collect();
        for l in &lines {
            let _ = parse_override(l);
        }
        if let Ok(c) = Config::from_toml_with_overrides("", &lines) {
            let back = Config::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back.train_hash(), c.train_hash());
        }
    });
}

#[test]
fn manifest_seeds() {
    for (name, seed) in corpus("manifest") {
        Manifest::from_bytes(&seed).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    replay("manifest", |d| {
        let _ = Manifest::from_bytes(d);
    });
}

#[test]
fn mask_seeds() {
    for (name, seed) in corpus("mask") {
        let m = decode_mask(&seed, 32).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(m.dim(), (32, 32));
    }
    let n = replay("mask", |d| {
        if let Ok(m) = decode_mask(d, 32) {
            assert_eq!(m.dim(), (32, 32));
        }
    });
    assert!(n > 100);
}
