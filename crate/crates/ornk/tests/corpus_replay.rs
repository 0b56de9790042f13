//! Replays the checked-in fuzz corpus seeds through their parsers, so the
//! seeds keep matching the current formats even where the fuzzers only
//! run with a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use ornk::config::parse_run_config;
use ornk::manifest::parse_manifest;
use ornk::ranking::parse_bank_manifest;
use ornk::roi_cache::parse_roi;
use ornk::tensor::parse_checkpoint;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
        let path = entry.unwrap().path();
        let bytes = fs::read(&path).unwrap();
        out.push((path, bytes));
    }
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out.sort();
    out
}

#[test]
fn every_corpus_seed_parses() {
    for (path, bytes) in seeds("checkpoint") {
        parse_checkpoint(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, bytes) in seeds("roi_entry") {
        parse_roi(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, bytes) in seeds("manifest_csv") {
        parse_manifest(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, bytes) in seeds("run_config") {
        parse_run_config(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
    for (path, bytes) in seeds("bank_manifest") {
        parse_bank_manifest(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn binary_seeds_reserialize_to_their_own_bytes() {
    use ornk::roi_cache::serialize_roi;
    use ornk::tensor::serialize_checkpoint;

    for (path, bytes) in seeds("checkpoint") {
        let (meta, params) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(serialize_checkpoint(&params, &meta).unwrap(), bytes, "{}", path.display());
    }
    for (path, bytes) in seeds("roi_entry") {
        let entry = parse_roi(&bytes).unwrap();
        assert_eq!(serialize_roi(&entry).unwrap(), bytes, "{}", path.display());
    }
}
