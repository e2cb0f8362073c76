mod common;

use std::collections::HashSet;

use common::golden::{self, EXPECTED_DROPS};
use lowres_mt::corpus::{
    gen_synthetic, normalize_text, preprocess, split, split_sizes, to_instruction, ParallelCorpus, PreprocessRules,
    SentencePair, SyntheticLanguage, DEFAULT_SYSTEM_PROMPT,
};
use proptest::prelude::*;

#[test]
fn golden_fixture_output_and_counts() {
    let run = golden::run();
    assert_eq!(
        String::from_utf8_lossy(&run.output),
        String::from_utf8_lossy(&run.golden)
    );
    assert_eq!(run.output, run.golden);
    for (rule, n) in EXPECTED_DROPS {
        assert_eq!(run.report.dropped(rule), n, "rule {rule}");
    }
    assert_eq!(run.report.input_count, 16);
    assert_eq!(run.report.output_count, 8);
    let total: usize = run.report.dropped_by_rule.values().sum();
    assert_eq!(run.report.output_count, run.report.input_count - total);
}

#[test]
fn preprocess_is_idempotent_on_golden_output() {
    let run = golden::run();
    let (again, report) = run.second_pass;
    assert_eq!(again, run.first);
    assert!(report.dropped_by_rule.values().all(|&n| n == 0));
}

#[test]
fn split_of_full_corpus_size() {
    assert_eq!(split_sizes(353_629, (0.8, 0.1, 0.1)).unwrap(), (282_903, 35_363, 35_363));
    assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), (80, 10, 10));
    assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
}

#[test]
fn instruction_records() {
    let p = SentencePair::new("Bonjour", "I ni sɔgɔma");
    let r = to_instruction(&p, DEFAULT_SYSTEM_PROMPT).unwrap();
    assert_eq!(r.system, "Traduire cette phrase du français en bambara");
    assert_eq!((r.user.as_str(), r.assistant.as_str()), ("Bonjour", "I ni sɔgɔma"));
    assert!(to_instruction(&SentencePair::new("", "x"), "X").is_err());
}

#[test]
fn synthetic_targets_invert_to_sources() {
    let lang = SyntheticLanguage::new(20, 9);
    let c = lang.sample(64);
    assert_eq!(c.len(), 64);
    for p in &c.pairs {
        assert_eq!(lang.invert(&p.tgt).as_deref(), Some(p.src.as_str()));
    }
    assert_eq!(gen_synthetic(64, 9, 20), c);
}

fn text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-cɛ ,.!?«»<>{}0-9)🙏]{0,24}").unwrap()
}

fn corpus() -> impl Strategy<Value = ParallelCorpus> {
    proptest::collection::vec((text(), text()), 0..30)
        .prop_map(|v| ParallelCorpus::new("a", "b", v.into_iter().map(|(s, t)| SentencePair::new(s, t)).collect()))
}

proptest! {
    #[test]
    fn normalize_is_idempotent(s in text()) {
        let once = normalize_text(&s);
        prop_assert_eq!(normalize_text(&once), once.clone());
        prop_assert_eq!(once.trim(), once.as_str());
        prop_assert!(!once.contains("  "));
    }

    #[test]
    fn preprocess_idempotent_and_deduplicated(c in corpus()) {
        let rules = PreprocessRules::default();
        let (once, report) = preprocess(&c, &rules);
        let (twice, report2) = preprocess(&once, &rules);
        prop_assert_eq!(&twice, &once);
        prop_assert!(report2.dropped_by_rule.values().all(|&n| n == 0));
        let dropped: usize = report.dropped_by_rule.values().sum();
        prop_assert_eq!(report.output_count + dropped, report.input_count);
        let keys: HashSet<_> = once.pairs.iter().collect();
        prop_assert_eq!(keys.len(), once.len());
        prop_assert!(once.pairs.iter().all(|p| !p.src.is_empty() && !p.tgt.is_empty()));
    }

    #[test]
    fn split_partitions(n in 1usize..200, seed in 0u64..1000) {
        let c = gen_synthetic(n, 1, 12);
        let s = split(&c, (0.8, 0.1, 0.1), seed).unwrap();
        prop_assert_eq!(s.train.len(), (0.8 * n as f64).floor() as usize);
        let mut all: Vec<_> = s.train.pairs.iter().chain(&s.valid.pairs).chain(&s.test.pairs).cloned().collect();
        let mut orig = c.pairs.clone();
        all.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
        orig.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
        prop_assert_eq!(all, orig);
        prop_assert_eq!(split(&c, (0.8, 0.1, 0.1), seed).unwrap(), s);
    }
}

#[test]
fn dedup_keeps_first_occurrence_order() {
    let c = ParallelCorpus::new(
        "a",
        "b",
        ["x y", "p q", "x y", "r s", "p q"]
            .iter()
            .map(|s| {
                let (a, b) = s.split_once(' ').unwrap();
                SentencePair::new(a, b)
            })
            .collect(),
    );
    let (out, report) = preprocess(&c, &PreprocessRules::default());
    let got: Vec<&str> = out.pairs.iter().map(|p| p.src.as_str()).collect();
    assert_eq!(got, ["x", "p", "r"]);
    assert_eq!(report.dropped("duplicate"), 2);
}
