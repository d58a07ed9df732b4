use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn files(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            files(&p, out);
        } else if p.extension().is_some_and(|x| x == "rs" || x == "toml") {
            out.push(p);
        }
    }
}

/// Git-style blob hashes of every source file, folded into one digest.
fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("..");
    let mut all = Vec::new();
    for krate in ["core", "ftvp"] {
        let base = root.join(krate);
        println!("cargo:rerun-if-changed={}", base.join("src").display());
        println!("cargo:rerun-if-changed={}", base.join("Cargo.toml").display());
        files(&base.join("src"), &mut all);
        all.push(base.join("Cargo.toml"));
    }
    all.sort();
    let mut tree = Sha256::new();
    for p in &all {
        let Ok(bytes) = fs::read(p) else { continue };
        let mut blob = Sha256::new();
        blob.update(format!("blob {}\0", bytes.len()));
        blob.update(&bytes);
        let rel = p.strip_prefix(&root).unwrap_or(p);
        tree.update(format!("{} {}\n", hex::encode(blob.finalize()), rel.display()));
    }
    println!("cargo:rustc-env=FTVP_CODE_DIGEST={}", hex::encode(tree.finalize()));
}
