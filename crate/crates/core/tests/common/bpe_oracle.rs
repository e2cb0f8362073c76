//! Brute-force BPE: recount every pair from scratch after each merge.

use std::collections::BTreeMap;

use lowres_mt::corpus::{ParallelCorpus, SentencePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn learn(sentences: &[String], budget: usize) -> Vec<(String, String)> {
    let mut freq: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for s in sentences {
        for w in s.split_whitespace() {
            *freq.entry(w.chars().map(String::from).collect()).or_default() += 1;
        }
    }
    let mut merges = Vec::new();
    while merges.len() < budget {
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (w, c) in &freq {
            for p in w.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_default() += c;
            }
        }
        // BTreeMap iterates in ascending pair order, so the first maximum
        // is the lexicographically smallest among ties.
        let mut best: Option<(&(String, String), usize)> = None;
        for (p, &c) in &counts {
            if c >= 2 && best.is_none_or(|(_, bc)| c > bc) {
                best = Some((p, c));
            }
        }
        let Some((pair, _)) = best else { break };
        let pair = pair.clone();
        let mut next = BTreeMap::new();
        for (w, c) in freq {
            let mut out = Vec::new();
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                    out.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    out.push(w[i].clone());
                    i += 1;
                }
            }
            *next.entry(out).or_default() += c;
        }
        freq = next;
        merges.push(pair);
    }
    merges
}

/// Ten small corpora (at most 50 words each).
pub fn fixtures() -> Vec<Vec<String>> {
    let mut out = vec![
        vec!["low low low low low lower lower newest newest newest newest newest newest widest widest widest".to_string()],
        vec!["aaaa aaa aa a".to_string(), "ab ab ba ba".to_string()],
        vec!["ɛɛɔ ɛɔ ɔɛɛ ŋaa ŋa ŋa".to_string()],
    ];
    let alphabets = ["ab", "abc", "xyz", "abcd", "lmno", "ptk", "ɛɔa"];
    for (i, alpha) in alphabets.iter().enumerate() {
        let chars: Vec<char> = alpha.chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let mut lines = Vec::new();
        let mut words = 0;
        while words < 50 {
            let n = rng.random_range(1..=6).min(50 - words);
            let line: Vec<String> = (0..n)
                .map(|_| (0..rng.random_range(1..=6)).map(|_| chars[rng.random_range(0..chars.len())]).collect())
                .collect();
            words += n;
            lines.push(line.join(" "));
        }
        out.push(lines);
    }
    out
}

pub fn word_total(c: &[String]) -> usize {
    c.iter().map(|s| s.split_whitespace().count()).sum()
}

pub fn corpus_of(lines: &[String]) -> ParallelCorpus {
    ParallelCorpus::new("a", "b", lines.iter().map(|l| SentencePair::new(l.as_str(), "")).collect())
}

/// Random single-spaced lines over a mixed-script alphabet.
pub fn random_lines(n: usize, seed: u64) -> Vec<String> {
    let chars: Vec<char> = "abcdeɛfgiklmnɲŋoɔprstuwyzéèàç'-.,?".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..rng.random_range(1..=12))
                .map(|_| (0..rng.random_range(1..=9)).map(|_| chars[rng.random_range(0..chars.len())]).collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
