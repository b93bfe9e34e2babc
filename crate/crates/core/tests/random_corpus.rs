mod common;

use std::fs;

use danglesweep::corpus::generate_source;

const SEEDS: u64 = 24;

/// `DANGLESWEEP_BLESS=1` rewrites the files from the generator.
#[test]
fn random_corpus_matches_generator() {
    let dir = common::corpus_dir("random");
    let bless = std::env::var_os("DANGLESWEEP_BLESS").is_some();
    for seed in 0..SEEDS {
        let path = dir.join(format!("seed-{seed:04}.lir"));
        let want = generate_source(seed);
        if bless {
            fs::write(&path, &want).unwrap();
            continue;
        }
        let got = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(got, want, "{} is stale; rerun with DANGLESWEEP_BLESS=1", path.display());
    }
    assert_eq!(common::corpus("random").len(), SEEDS as usize);
}
