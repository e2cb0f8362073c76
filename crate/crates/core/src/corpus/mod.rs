//! Parallel corpora: cleaning, deduplication, splitting, export and a
//! synthetic toy language pair for desk-scale training.

mod io;
mod rules;
mod synthetic;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{
    read_aligned, read_tsv, write_aligned, write_instructions, write_tsv, RawPair,
};
pub use rules::{
    clean_pair, has_anomalous_repetition, has_link, has_repetition, is_emoji, normalize_text,
    REPETITION_THRESHOLD,
};
pub use synthetic::{gen_synthetic, SyntheticLanguage, WordSubstitution};

/// Default instruction for French→Bambara prompt export.
pub const DEFAULT_SYSTEM_PROMPT: &str = "Traduire cette phrase du français en bambara";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error("sentence pair has an empty side")]
    EmptySide,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: String,
    pub tgt: String,
}

impl SentencePair {
    pub fn new(src: impl Into<String>, tgt: impl Into<String>) -> Self {
        Self {
            src: src.into(),
            tgt: tgt.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl ParallelCorpus {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>, pairs: Vec<SentencePair>) -> Self {
        Self {
            pairs,
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn with_pairs(&self, pairs: Vec<SentencePair>) -> Self {
        Self {
            pairs,
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
        }
    }

    /// Both sides of every pair, sources first.
    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.pairs
            .iter()
            .map(|p| p.src.as_str())
            .chain(self.pairs.iter().map(|p| p.tgt.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCorpus {
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub system: String,
    pub user: String,
    pub assistant: String,
}

/// Rule names used as keys of [`CleanReport::dropped_by_rule`].
pub mod rule {
    pub const ENCODING: &str = "encoding";
    pub const LINK: &str = "link";
    pub const REPETITION: &str = "repetition";
    pub const EMPTY: &str = "empty";
    pub const DUPLICATE: &str = "duplicate";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_count: usize,
    pub dropped_by_rule: BTreeMap<String, usize>,
    pub output_count: usize,
}

impl CleanReport {
    pub fn dropped(&self, rule: &str) -> usize {
        self.dropped_by_rule.get(rule).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessRules {
    pub drop_links: bool,
    pub drop_repetition: bool,
    pub repetition_threshold: usize,
    pub clean_pairs: bool,
    pub dedup: bool,
}

impl Default for PreprocessRules {
    fn default() -> Self {
        Self {
            drop_links: true,
            drop_repetition: true,
            repetition_threshold: REPETITION_THRESHOLD,
            clean_pairs: true,
            dedup: true,
        }
    }
}

/// Runs the cleaning pipeline: normalize → drop links → drop repetition →
/// one-sided marker/emoji cleanup → drop empty → dedup (first occurrence
/// wins). Each dropped pair is attributed to the first rule that hit it.
pub fn preprocess(corpus: &ParallelCorpus, rules: &PreprocessRules) -> (ParallelCorpus, CleanReport) {
    run_pipeline(corpus, rules, 0, corpus.len())
}

/// Like [`preprocess`], starting from undecoded lines. Pairs with invalid
/// UTF-8 on either side are skipped and counted under `encoding`.
pub fn preprocess_raw(
    raw: &[RawPair],
    src_lang: &str,
    tgt_lang: &str,
    rules: &PreprocessRules,
) -> (ParallelCorpus, CleanReport) {
    let mut pairs = Vec::with_capacity(raw.len());
    let mut bad = 0;
    for (s, t) in raw {
        match (std::str::from_utf8(s), std::str::from_utf8(t)) {
            (Ok(s), Ok(t)) => pairs.push(SentencePair::new(s, t)),
            _ => bad += 1,
        }
    }
    let corpus = ParallelCorpus::new(src_lang, tgt_lang, pairs);
    run_pipeline(&corpus, rules, bad, raw.len())
}

fn run_pipeline(
    corpus: &ParallelCorpus,
    rules: &PreprocessRules,
    encoding_drops: usize,
    input_count: usize,
) -> (ParallelCorpus, CleanReport) {
    let mut dropped: BTreeMap<String, usize> = [
        rule::ENCODING,
        rule::LINK,
        rule::REPETITION,
        rule::EMPTY,
        rule::DUPLICATE,
    ]
    .iter()
    .map(|r| (r.to_string(), 0))
    .collect();
    *dropped.get_mut(rule::ENCODING).unwrap() = encoding_drops;
    let mut hit = |r: &str| *dropped.get_mut(r).unwrap() += 1;

    let mut seen: HashSet<SentencePair> = HashSet::new();
    let mut out = Vec::new();
    for p in &corpus.pairs {
        let mut pair = SentencePair::new(normalize_text(&p.src), normalize_text(&p.tgt));
        if rules.drop_links && (has_link(&pair.src) || has_link(&pair.tgt)) {
            hit(rule::LINK);
            continue;
        }
        if rules.drop_repetition
            && (has_repetition(&pair.src, rules.repetition_threshold)
                || has_repetition(&pair.tgt, rules.repetition_threshold))
        {
            hit(rule::REPETITION);
            continue;
        }
        if rules.clean_pairs {
            pair = clean_pair(&pair);
        }
        if pair.src.is_empty() || pair.tgt.is_empty() {
            hit(rule::EMPTY);
            continue;
        }
        if rules.dedup && !seen.insert(pair.clone()) {
            hit(rule::DUPLICATE);
            continue;
        }
        out.push(pair);
    }
    let report = CleanReport {
        input_count,
        output_count: out.len(),
        dropped_by_rule: dropped,
    };
    (corpus.with_pairs(out), report)
}

/// Split sizes for `n` items: `floor(r_train·n)`, `round(r_valid·n)`, rest.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize), CorpusError> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::Config(format!(
            "split ratios {a}, {b}, {c} must be in [0, 1] and sum to 1"
        )));
    }
    let train = ((a * n as f64) + 1e-9).floor() as usize;
    let valid = ((b * n as f64).round() as usize).min(n - train);
    Ok((train, valid, n - train - valid))
}

/// Deterministic shuffle under `seed`, then contiguous train/valid/test
/// partition.
pub fn split(corpus: &ParallelCorpus, ratios: (f64, f64, f64), seed: u64) -> Result<SplitCorpus, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Config("cannot split an empty corpus".into()));
    }
    let (ntr, nva, _) = split_sizes(corpus.len(), ratios)?;
    let mut pairs = corpus.pairs.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "split", 0));
    pairs.shuffle(&mut rng);
    let test = pairs.split_off(ntr + nva);
    let valid = pairs.split_off(ntr);
    Ok(SplitCorpus {
        train: corpus.with_pairs(pairs),
        valid: corpus.with_pairs(valid),
        test: corpus.with_pairs(test),
        seed,
    })
}

pub fn to_instruction(pair: &SentencePair, system_prompt: &str) -> Result<InstructionRecord, CorpusError> {
    if pair.src.trim().is_empty() || pair.tgt.trim().is_empty() {
        return Err(CorpusError::EmptySide);
    }
    Ok(InstructionRecord {
        system: system_prompt.to_string(),
        user: pair.src.clone(),
        assistant: pair.tgt.clone(),
    })
}
