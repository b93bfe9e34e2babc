#![allow(dead_code)]

pub mod oracle;
pub mod soundness;
pub mod stress;
pub mod criteria;

use std::fs;
use std::path::PathBuf;

pub fn corpus_dir(dir: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus").join(dir)
}

/// `.lir` files of a corpus directory, sorted.
pub fn corpus(dir: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(corpus_dir(dir))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "lir"))
        .collect();
    v.sort();
    v
}
