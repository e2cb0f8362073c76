//! Byte Pair Encoding over whitespace words with a shared source/target
//! vocabulary. Non-final subwords carry the `@@` continuation marker.

mod vocab;

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::corpus::ParallelCorpus;

pub use vocab::{build_vocab, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID};

pub const CONTINUATION: &str = "@@";
/// Merge count used when none is configured.
pub const DEFAULT_NUM_MERGES: usize = 5000;
const MERGE_FILE_TAG: &str = "#bpe-v1";

#[derive(Debug, thiserror::Error)]
pub enum BpeError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("merge file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

type Pair = (String, String);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<Pair>,
    num_merges: usize,
    ranks: HashMap<Pair, usize>,
}

/// Word frequencies over whitespace tokens.
pub fn word_counts<'a>(sentences: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for w in s.split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Learns merges from both sides of `train`.
pub fn learn_bpe(train: &ParallelCorpus, num_merges: usize) -> Result<BpeModel, BpeError> {
    let counts = word_counts(train.sentences());
    if counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    Ok(learn_from_counts(&counts, num_merges))
}

/// Greedy merge learning. Each round merges the most frequent adjacent
/// pair (ties: lexicographically smallest pair); learning stops once no
/// pair occurs at least twice.
pub fn learn_from_counts(counts: &BTreeMap<String, usize>, num_merges: usize) -> BpeModel {
    // Symbols are interned; `words` holds each distinct word's symbol ids.
    let mut table: Vec<String> = Vec::new();
    let mut intern: HashMap<String, u32> = HashMap::new();
    let mut id_of = |s: &str, table: &mut Vec<String>| -> u32 {
        if let Some(&i) = intern.get(s) {
            return i;
        }
        table.push(s.to_string());
        let i = (table.len() - 1) as u32;
        intern.insert(s.to_string(), i);
        i
    };
    let mut words: Vec<(Vec<u32>, i64)> = counts
        .iter()
        .map(|(w, &c)| {
            let syms = w
                .chars()
                .map(|ch| id_of(ch.encode_utf8(&mut [0; 4]), &mut table))
                .collect();
            (syms, c as i64)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (syms, c)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&p, &c) in &pair_counts {
            if c < 2 {
                continue;
            }
            best = match best {
                None => Some((p, c)),
                Some((bp, bc)) => {
                    let better = c > bc
                        || (c == bc
                            && (table[p.0 as usize].as_str(), table[p.1 as usize].as_str())
                                < (table[bp.0 as usize].as_str(), table[bp.1 as usize].as_str()));
                    if better {
                        Some((p, c))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        let Some((pair, _)) = best else { break };
        let merged = format!("{}{}", table[pair.0 as usize], table[pair.1 as usize]);
        let new_id = id_of(&merged, &mut table);
        let mut affected: Vec<usize> = where_.get(&pair).map(|s| s.iter().copied().collect()).unwrap_or_default();
        affected.sort_unstable();
        for wi in affected {
            let (syms, c) = &mut words[wi];
            for p in syms.windows(2) {
                *pair_counts.get_mut(&(p[0], p[1])).unwrap() -= *c;
            }
            *syms = merge_ids(syms, pair, new_id);
            for p in syms.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += *c;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
        merges.push((table[pair.0 as usize].clone(), table[pair.1 as usize].clone()));
    }
    BpeModel::from_merges(merges, num_merges)
}

fn merge_ids(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Merges every left-to-right occurrence of `pair` in `syms`.
pub fn merge_symbols(syms: &[String], pair: (&str, &str)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", syms[i], syms[i + 1]));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>, num_merges: usize) -> Self {
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self {
            merges,
            num_merges,
            ranks,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Configured merge budget (the learned list may be shorter).
    pub fn num_merges(&self) -> usize {
        self.num_merges
    }

    /// Segments one word by replaying the merges in learned order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms: Vec<String> = word.chars().map(String::from).collect();
        let mut last: Option<usize> = None;
        loop {
            // The next merge that replay would apply is the lowest-ranked
            // present pair ranked after the previous one.
            let next = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .filter(|&r| last.is_none_or(|l| r > l))
                .min();
            let Some(r) = next else { break };
            let (a, b) = &self.merges[r];
            syms = merge_symbols(&syms, (a, b));
            last = Some(r);
        }
        syms
    }

    pub fn apply(&self, sentence: &str) -> Vec<String> {
        let mut out = Vec::new();
        for w in sentence.split_whitespace() {
            let segs = self.segment_word(w);
            let n = segs.len();
            out.extend(segs.into_iter().enumerate().map(|(i, s)| {
                if i + 1 < n {
                    s + CONTINUATION
                } else {
                    s
                }
            }));
        }
        out
    }

    /// `#bpe-v1 <num_merges>` followed by one `left right` line per merge.
    pub fn to_merge_file(&self) -> String {
        let mut s = format!("{MERGE_FILE_TAG} {}\n", self.num_merges);
        for (a, b) in &self.merges {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn from_merge_file(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(BpeError::Parse {
            line: 1,
            msg: "empty merge file".into(),
        })?;
        let num_merges = header
            .strip_prefix(MERGE_FILE_TAG)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| BpeError::Parse {
                line: 1,
                msg: format!("expected `{MERGE_FILE_TAG} <num_merges>`, got `{header}`"),
            })?;
        let mut merges = Vec::new();
        let mut seen = HashSet::new();
        for (i, l) in lines.enumerate() {
            let mut parts = l.split(' ');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(BpeError::Parse {
                    line: i + 2,
                    msg: format!("expected `left right`, got `{l}`"),
                });
            };
            if a.is_empty() || b.is_empty() || !seen.insert((a.to_string(), b.to_string())) {
                return Err(BpeError::Parse {
                    line: i + 2,
                    msg: format!("empty or repeated merge `{l}`"),
                });
            }
            merges.push((a.to_string(), b.to_string()));
        }
        if merges.len() > num_merges {
            return Err(BpeError::Parse {
                line: 1,
                msg: format!("{} merges exceed declared budget {num_merges}", merges.len()),
            });
        }
        Ok(Self::from_merges(merges, num_merges))
    }
}

/// Joins subwords: `@@`-marked tokens glue to the next one.
pub fn decode_bpe<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}
