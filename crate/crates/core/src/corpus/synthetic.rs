//! Toy language pair: the target sentence is the source sentence with word
//! order reversed and every word replaced through a fixed bijection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParallelCorpus, SentencePair};
use crate::seed;

const SRC_CONSONANTS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "s", "t"];
const SRC_VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const TGT_CONSONANTS: &[&str] = &["b", "c", "d", "f", "g", "j", "k", "l", "m", "n", "ɲ", "ŋ", "p", "r", "s", "t", "w", "y", "z"];
const TGT_VOWELS: &[&str] = &["ɛ", "ɔ"];

/// Shortest sentence emitted by [`gen_synthetic`].
pub const MIN_SENTENCE_LEN: usize = 3;
/// Longest sentence emitted by [`gen_synthetic`].
pub const MAX_SENTENCE_LEN: usize = 8;

fn word(index: usize, consonants: &[&str], vowels: &[&str]) -> String {
    let base = consonants.len() * vowels.len();
    let mut digits = Vec::new();
    let mut i = index;
    while digits.len() < 2 || i > 0 {
        digits.push(i % base);
        i /= base;
    }
    digits
        .iter()
        .map(|&d| format!("{}{}", consonants[d / vowels.len()], vowels[d % vowels.len()]))
        .collect()
}

/// Reverse-and-substitute transform over whitespace words.
#[derive(Clone, Debug, PartialEq)]
pub struct WordSubstitution {
    forward: HashMap<String, String>,
    inverse: HashMap<String, String>,
}

impl WordSubstitution {
    /// Fails unless the mapping is injective.
    pub fn new<I, S, T>(pairs: I) -> Option<Self>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut forward = HashMap::new();
        let mut inverse = HashMap::new();
        for (s, t) in pairs {
            let (s, t) = (s.into(), t.into());
            if inverse.insert(t.clone(), s.clone()).is_some() || forward.insert(s, t).is_some() {
                return None;
            }
        }
        Some(Self { forward, inverse })
    }

    fn apply(map: &HashMap<String, String>, sentence: &str) -> Option<String> {
        let words: Option<Vec<&str>> = sentence
            .split_whitespace()
            .rev()
            .map(|w| map.get(w).map(String::as_str))
            .collect();
        Some(words?.join(" "))
    }

    pub fn transform(&self, source: &str) -> Option<String> {
        Self::apply(&self.forward, source)
    }

    pub fn invert(&self, target: &str) -> Option<String> {
        Self::apply(&self.inverse, target)
    }
}

/// Seeded synthetic vocabulary plus its substitution.
#[derive(Clone, Debug)]
pub struct SyntheticLanguage {
    pub vocab_size: usize,
    pub seed: u64,
    source_words: Vec<String>,
    substitution: WordSubstitution,
}

impl SyntheticLanguage {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        let source_words: Vec<String> = (0..vocab_size)
            .map(|i| word(i, SRC_CONSONANTS, SRC_VOWELS))
            .collect();
        let mut perm: Vec<usize> = (0..vocab_size).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, "synth-substitution", 0)));
        let substitution = WordSubstitution::new(
            source_words
                .iter()
                .zip(&perm)
                .map(|(s, &j)| (s.clone(), word(j, TGT_CONSONANTS, TGT_VOWELS))),
        )
        .expect("generated words are distinct");
        Self {
            vocab_size,
            seed,
            source_words,
            substitution,
        }
    }

    pub fn source_words(&self) -> &[String] {
        &self.source_words
    }

    pub fn substitution(&self) -> &WordSubstitution {
        &self.substitution
    }

    pub fn translate(&self, source: &str) -> Option<String> {
        self.substitution.transform(source)
    }

    pub fn invert(&self, target: &str) -> Option<String> {
        self.substitution.invert(target)
    }

    /// `n` random source sentences and their translations.
    pub fn sample(&self, n: usize) -> ParallelCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.seed, "synth-sentences", 0));
        let pairs = (0..n)
            .map(|_| {
                let len = rng.random_range(MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN);
                let src = (0..len)
                    .map(|_| self.source_words[rng.random_range(0..self.vocab_size)].as_str())
                    .collect::<Vec<_>>()
                    .join(" ");
                let tgt = self.translate(&src).expect("source words are in the vocabulary");
                SentencePair { src, tgt }
            })
            .collect();
        ParallelCorpus::new("syn-src", "syn-tgt", pairs)
    }
}

/// Deterministic toy corpus of `n` pairs over `vocab_size` words.
pub fn gen_synthetic(n: usize, seed: u64, vocab_size: usize) -> ParallelCorpus {
    assert!(n >= 1 && vocab_size >= 4, "gen_synthetic needs n >= 1 and vocab_size >= 4");
    SyntheticLanguage::new(vocab_size, seed).sample(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reverse_and_substitute() {
        let sub = WordSubstitution::new([("a", "α"), ("b", "β"), ("c", "γ")]).unwrap();
        assert_eq!(sub.transform("a b c").unwrap(), "γ β α");
        assert_eq!(sub.invert("γ β α").unwrap(), "a b c");
        assert!(sub.transform("a z").is_none());
        assert!(WordSubstitution::new([("a", "x"), ("b", "x")]).is_none());
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic(2, 1, 20), gen_synthetic(2, 1, 20));
        assert_ne!(gen_synthetic(8, 1, 20), gen_synthetic(8, 2, 20));
    }

    #[test]
    fn words_distinct_between_languages() {
        let lang = SyntheticLanguage::new(300, 3);
        let src: std::collections::HashSet<_> = lang.source_words().iter().collect();
        assert_eq!(src.len(), 300);
        for w in lang.source_words() {
            let t = lang.translate(w).unwrap();
            assert!(!src.contains(&t));
        }
    }
}
