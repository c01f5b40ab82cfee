//! Embeds a content hash of the source manifest so every run directory can
//! record exactly which code produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn visit(dir: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            visit(&path, files);
        } else if path.extension().is_some_and(|e| e == "rs") {
            if let Ok(bytes) = fs::read(&path) {
                files.insert(path.display().to_string(), bytes);
            }
        }
    }
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut files = BTreeMap::new();
    visit(&root.join("src"), &mut files);
    if let Ok(bytes) = fs::read(root.join("Cargo.toml")) {
        files.insert("Cargo.toml".into(), bytes);
    }

    // FNV-1a over (path, contents) pairs in sorted order; stable and
    // dependency-free. This identifies the code, it does not authenticate it.
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (path, bytes) in &files {
        feed(path.as_bytes());
        feed(bytes);
    }
    println!("cargo::rustc-env=GSA_CODE_MANIFEST={h:016x}");
    println!("cargo::rerun-if-changed=src");
    println!("cargo::rerun-if-changed=Cargo.toml");
}
