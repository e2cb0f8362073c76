use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const BLEU_MAX_ORDER: usize = 4;
pub const CHRF_MAX_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any order without matches yields BLEU 0.
    #[default]
    None,
    /// Adds one to matches and totals for orders above 1.
    AddOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_percent: f64,
    pub chrf_score: f64,
    pub n_sentences: usize,
    pub brevity_penalty: f64,
    /// Clipped n-gram precisions p_1..p_4.
    pub precisions: [f64; BLEU_MAX_ORDER],
    pub matches: [usize; BLEU_MAX_ORDER],
    pub totals: [usize; BLEU_MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sentence: Option<Vec<SentenceScore>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub bleu: f64,
    pub chrf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChrfStats {
    pub score: f64,
    /// Character n-gram precision and recall per order (1..=6).
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn check<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<(), EvalError> {
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch(hyps.len(), refs.len()));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// (clipped matches, hypothesis total, reference total) for order `n`.
fn overlap<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

#[derive(Default, Clone, Copy)]
struct BleuStats {
    matches: [usize; BLEU_MAX_ORDER],
    totals: [usize; BLEU_MAX_ORDER],
    ref_totals: [usize; BLEU_MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = Self {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Self::default()
        };
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t, rt) = overlap(&h, &r, n);
            s.matches[n - 1] = m;
            s.totals[n - 1] = t;
            s.ref_totals[n - 1] = rt;
        }
        s
    }

    fn add(&mut self, o: &Self) {
        for i in 0..BLEU_MAX_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
            self.ref_totals[i] += o.ref_totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// (bleu percent, brevity penalty, precisions)
    fn score(&self, smoothing: Smoothing) -> (f64, f64, [f64; BLEU_MAX_ORDER]) {
        let mut precisions = [0.0; BLEU_MAX_ORDER];
        let mut log_sum = 0.0;
        let mut orders = 0;
        let mut zero = false;
        for i in 0..BLEU_MAX_ORDER {
            if self.totals[i] == 0 && self.ref_totals[i] == 0 {
                continue;
            }
            let (m, t) = match smoothing {
                Smoothing::AddOne if i > 0 => (self.matches[i] + 1, self.totals[i] + 1),
                _ => (self.matches[i], self.totals[i]),
            };
            precisions[i] = if t == 0 { 0.0 } else { m as f64 / t as f64 };
            if m == 0 {
                zero = true;
            } else {
                log_sum += precisions[i].ln();
            }
            orders += 1;
        }
        let bp = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        if zero || orders == 0 || self.hyp_len == 0 {
            return (0.0, bp, precisions);
        }
        let bleu = 100.0 * bp * (log_sum / orders as f64).exp();
        (bleu.min(100.0), bp, precisions)
    }
}

/// Corpus BLEU over whitespace tokens (4-gram cap), without smoothing.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<EvalReport, EvalError> {
    bleu_with(hyps, refs, Smoothing::None)
}

pub fn bleu_with<S: AsRef<str>>(hyps: &[S], refs: &[S], smoothing: Smoothing) -> Result<EvalReport, EvalError> {
    check(hyps, refs)?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::of(h.as_ref(), r.as_ref()));
    }
    let (bleu_percent, brevity_penalty, precisions) = total.score(smoothing);
    Ok(EvalReport {
        bleu_percent,
        chrf_score: 0.0,
        n_sentences: hyps.len(),
        brevity_penalty,
        precisions,
        matches: total.matches,
        totals: total.totals,
        hyp_len: total.hyp_len,
        ref_len: total.ref_len,
        per_sentence: None,
    })
}

/// BLEU and chrF together, optionally with sentence-level scores
/// (sentence BLEU uses add-one smoothing).
pub fn evaluate<S: AsRef<str>>(hyps: &[S], refs: &[S], per_sentence: bool) -> Result<EvalReport, EvalError> {
    let mut report = bleu(hyps, refs)?;
    report.chrf_score = chrf(hyps, refs)?;
    if per_sentence {
        report.per_sentence = Some(
            hyps.iter()
                .zip(refs)
                .map(|(h, r)| {
                    let (b, _, _) = BleuStats::of(h.as_ref(), r.as_ref()).score(Smoothing::AddOne);
                    let c = chrf_stats(&[h.as_ref()], &[r.as_ref()]).map(|s| s.score).unwrap_or(0.0);
                    SentenceScore { bleu: b, chrf: c }
                })
                .collect(),
        );
    }
    Ok(report)
}

/// chrF (character n-grams up to 6, β = 2) on a 0–100 scale.
pub fn chrf<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64, EvalError> {
    chrf_stats(hyps, refs).map(|s| s.score)
}

pub fn chrf_stats<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<ChrfStats, EvalError> {
    check(hyps, refs)?;
    // [order] -> (matches, hyp total, ref total)
    let mut stats = [(0usize, 0usize, 0usize); CHRF_MAX_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.as_ref().chars().filter(|c| !c.is_whitespace()).collect();
        for (n, st) in stats.iter_mut().enumerate() {
            let (m, ht, rt) = overlap(&hc, &rc, n + 1);
            st.0 += m;
            st.1 += ht;
            st.2 += rt;
        }
    }
    let mut precision = Vec::with_capacity(CHRF_MAX_ORDER);
    let mut recall = Vec::with_capacity(CHRF_MAX_ORDER);
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0);
    for &(m, ht, rt) in &stats {
        let p = if ht == 0 { 0.0 } else { m as f64 / ht as f64 };
        let r = if rt == 0 { 0.0 } else { m as f64 / rt as f64 };
        precision.push(p);
        recall.push(r);
        if ht > 0 || rt > 0 {
            p_sum += p;
            r_sum += r;
            orders += 1;
        }
    }
    let score = if orders == 0 {
        0.0
    } else {
        let (p, r) = (p_sum / orders as f64, r_sum / orders as f64);
        let b2 = CHRF_BETA * CHRF_BETA;
        if p + r == 0.0 {
            0.0
        } else {
            100.0 * (1.0 + b2) * p * r / (b2 * p + r)
        }
    };
    Ok(ChrfStats {
        score,
        precision,
        recall,
    })
}
