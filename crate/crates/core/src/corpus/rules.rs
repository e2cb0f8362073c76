//! Per-sentence and per-pair cleaning rules.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;

use super::SentencePair;

static WS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").unwrap());
static SPACE_BEFORE_PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+([,.;:!?])").unwrap());
static NO_SPACE_AFTER_PUNCT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([,.;:!?])(\p{Alphabetic})").unwrap());
static LINK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap());
static ENUM_MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*([0-9]+|[a-z])[).]\s+").unwrap());

const UNWANTED: [char; 6] = ['«', '»', '<', '>', '{', '}'];

/// Minimum run of one alphabetic character that marks noisy text.
pub const REPETITION_THRESHOLD: usize = 4;

fn collapse_ws(text: &str) -> String {
    WS.replace_all(text, " ").trim().to_string()
}

/// Removes unwanted characters, collapses whitespace and fixes spacing
/// around `, . ; : ! ?` (none before, one before a following letter).
/// URLs are left intact so the link rule still sees them.
pub fn normalize_text(text: &str) -> String {
    let stripped: String = text.chars().filter(|c| !UNWANTED.contains(c)).collect();
    let s = collapse_ws(&stripped);
    let mut out = String::with_capacity(s.len());
    let mut last = 0;
    for m in LINK.find_iter(&s) {
        out.push_str(&fix_punct(&s[last..m.start()]));
        out.push_str(m.as_str());
        last = m.end();
    }
    out.push_str(&fix_punct(&s[last..]));
    out.trim().to_string()
}

fn fix_punct(s: &str) -> String {
    let s = SPACE_BEFORE_PUNCT.replace_all(s, "$1");
    NO_SPACE_AFTER_PUNCT.replace_all(&s, "$1 $2").into_owned()
}

pub fn has_link(text: &str) -> bool {
    LINK.is_match(text)
}

/// True when any alphabetic character repeats at least
/// [`REPETITION_THRESHOLD`] times in a row (case-insensitive).
pub fn has_anomalous_repetition(text: &str) -> bool {
    has_repetition(text, REPETITION_THRESHOLD)
}

pub fn has_repetition(text: &str, threshold: usize) -> bool {
    let mut prev: Option<char> = None;
    let mut run = 0;
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphabetic() && Some(c) == prev {
            run += 1;
        } else {
            run = 1;
        }
        if c.is_alphabetic() && run >= threshold {
            return true;
        }
        prev = Some(c);
    }
    false
}

/// Pictographic emoji plus the joiners and modifiers that combine with them.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF
        | 0x2600..=0x27BF
        | 0x2B00..=0x2BFF
        | 0xFE0F
        | 0x200D
        | 0x20E3
        | 0xE0020..=0xE007F
    )
}

fn enum_marker(text: &str) -> Option<usize> {
    ENUM_MARKER.find(text).map(|m| m.end())
}

/// Emoji become spaces so that neighbouring text never fuses into a new
/// word (or a new character run).
fn strip_emoji(text: &str, keep: &HashSet<char>) -> String {
    let s: String = text
        .chars()
        .map(|c| if is_emoji(c) && !keep.contains(&c) { ' ' } else { c })
        .collect();
    collapse_ws(&s)
}

/// Drops an enumeration marker or emoji found on only one side of the pair.
/// Repeats until nothing changes, since removing an emoji can expose a
/// marker.
pub fn clean_pair(pair: &SentencePair) -> SentencePair {
    let mut cur = pair.clone();
    loop {
        let next = clean_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn clean_once(pair: &SentencePair) -> SentencePair {
    let (mut src, mut tgt) = (pair.src.clone(), pair.tgt.clone());
    loop {
        match (enum_marker(&src), enum_marker(&tgt)) {
            (Some(end), None) => src = src[end..].trim().to_string(),
            (None, Some(end)) => tgt = tgt[end..].trim().to_string(),
            _ => break,
        }
    }
    let src_emoji: HashSet<char> = src.chars().filter(|c| is_emoji(*c)).collect();
    let tgt_emoji: HashSet<char> = tgt.chars().filter(|c| is_emoji(*c)).collect();
    if src_emoji != tgt_emoji {
        let shared: HashSet<char> = src_emoji.intersection(&tgt_emoji).copied().collect();
        src = strip_emoji(&src, &shared);
        tgt = strip_emoji(&tgt, &shared);
    }
    SentencePair {
        src: normalize_text(&src),
        tgt: normalize_text(&tgt),
    }
}
