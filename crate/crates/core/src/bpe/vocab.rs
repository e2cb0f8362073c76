use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{BpeError, BpeModel};
use crate::corpus::ParallelCorpus;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Dense token ↔ id map; ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings for `ids`, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i > EOS_ID)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// `token<TAB>id` per line.
    pub fn to_file(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_file(text: &str) -> Result<Self, BpeError> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| BpeError::Parse { line: i + 1, msg };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| err(format!("expected `token<TAB>id`, got `{line}`")))?;
            let id: usize = id.parse().map_err(|_| err(format!("bad id `{id}`")))?;
            if id != i {
                return Err(err(format!("ids must be dense and ordered, found {id} at position {i}")));
            }
            tokens.push(tok.to_string());
        }
        let specials = [PAD, UNK, BOS, EOS];
        if tokens.len() < 4 || tokens[..4] != specials {
            return Err(BpeError::Parse {
                line: 1,
                msg: "vocabulary must start with <pad>, <unk>, <s>, </s>".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }

    /// SHA-256 of the vocabulary file contents.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file().as_bytes()))
    }
}

/// Specials followed by every subword type that `model` produces on both
/// sides of `train`, by descending frequency then lexicographically.
pub fn build_vocab(model: &BpeModel, train: &ParallelCorpus) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in train.sentences() {
        for t in model.apply(s) {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut types: Vec<(String, usize)> = counts.into_iter().collect();
    types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = [PAD, UNK, BOS, EOS]
        .iter()
        .map(|s| s.to_string())
        .chain(types.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens)
}
