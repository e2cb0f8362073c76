use std::path::PathBuf;

use lowres_mt::corpus::{preprocess, preprocess_raw, read_tsv, write_tsv, CleanReport, ParallelCorpus, PreprocessRules};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Expected per-rule drops for `preprocess_input.tsv`.
pub const EXPECTED_DROPS: [(&str, usize); 5] =
    [("duplicate", 2), ("empty", 1), ("encoding", 1), ("link", 2), ("repetition", 2)];

pub struct GoldenRun {
    pub output: Vec<u8>,
    pub golden: Vec<u8>,
    pub report: CleanReport,
    pub second_pass: (ParallelCorpus, CleanReport),
    pub first: ParallelCorpus,
}

pub fn run() -> GoldenRun {
    let raw = read_tsv(fixture("preprocess_input.tsv")).unwrap();
    let rules = PreprocessRules::default();
    let (clean, report) = preprocess_raw(&raw, "fr", "bm", &rules);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clean.tsv");
    write_tsv(&out, &clean).unwrap();
    GoldenRun {
        output: std::fs::read(&out).unwrap(),
        golden: std::fs::read(fixture("preprocess_golden.tsv")).unwrap(),
        second_pass: preprocess(&clean, &rules),
        report,
        first: clean,
    }
}
