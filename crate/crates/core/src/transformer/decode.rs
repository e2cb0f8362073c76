use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::{Binder, Ctx, Net, TransformerModel};
use super::TransformerError;
use crate::autodiff::{Graph, Scalar, Tensor};
use crate::bpe::{BOS_ID, EOS_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Token ids starting with bos.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens (bos excluded, eos kept).
    pub fn len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generated tokens without bos and eos.
    pub fn content(&self) -> &[usize] {
        let t = &self.tokens[1.min(self.tokens.len())..];
        t.strip_suffix(&[EOS_ID]).unwrap_or(t)
    }
}

/// Anything that scores the next token given a bos-prefixed prefix.
pub trait StepModel {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, TransformerError>;
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Appends the most probable token (lowest id on ties) until eos or
/// `max_len` generated tokens.
pub fn greedy_decode<M: StepModel + ?Sized>(model: &mut M, max_len: usize) -> Result<Hypothesis, TransformerError> {
    let mut tokens = vec![BOS_ID];
    let mut log_prob = 0.0;
    while tokens.len() - 1 < max_len {
        let lp = model.next_log_probs(&tokens)?;
        let t = argmax(&lp);
        log_prob += lp[t];
        tokens.push(t);
        if t == EOS_ID {
            break;
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: true,
    })
}

fn lexicographic(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| a.tokens.cmp(&b.tokens))
}

fn normalized(h: &Hypothesis, alpha: f64) -> f64 {
    h.log_prob / (h.len().max(1) as f64).powf(alpha)
}

/// Beam search keeping the `width` best prefixes per step. Hypotheses that
/// emit eos or reach `max_len` move to a completed pool, which is ranked by
/// `log_prob / len^length_alpha` (ties: shorter, then smaller ids).
pub fn beam_search<M: StepModel + ?Sized>(
    model: &mut M,
    width: usize,
    max_len: usize,
    length_alpha: f64,
) -> Result<Hypothesis, TransformerError> {
    if width < 1 {
        return Err(TransformerError::Config("beam width must be at least 1".into()));
    }
    let mut beams = vec![Hypothesis {
        tokens: vec![BOS_ID],
        log_prob: 0.0,
        finished: false,
    }];
    let mut completed = Vec::new();
    while !beams.is_empty() {
        let mut cand = Vec::new();
        for h in &beams {
            let lp = model.next_log_probs(&h.tokens)?;
            for (t, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let finished = t == EOS_ID || tokens.len() > max_len;
                cand.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished,
                });
            }
        }
        cand.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| lexicographic(a, b)));
        cand.truncate(width);
        beams.clear();
        for h in cand {
            if h.finished {
                completed.push(h);
            } else {
                beams.push(h);
            }
        }
    }
    completed
        .into_iter()
        .min_by(|a, b| {
            normalized(b, length_alpha)
                .total_cmp(&normalized(a, length_alpha))
                .then_with(|| lexicographic(a, b))
        })
        .ok_or_else(|| TransformerError::Config("beam search produced no hypothesis".into()))
}

/// Decoder step for one source sentence with the encoder run once.
pub struct TransformerStep<'m, F: Scalar> {
    model: &'m TransformerModel<F>,
    lora_scale: f64,
    memory: Tensor<F>,
    mask: Tensor<F>,
}

impl<'m, F: Scalar> TransformerStep<'m, F> {
    pub fn new(model: &'m TransformerModel<F>, src: &[usize]) -> Result<Self, TransformerError> {
        Self::with_lora_scale(model, src, 1.0)
    }

    pub fn with_lora_scale(model: &'m TransformerModel<F>, src: &[usize], lora_scale: f64) -> Result<Self, TransformerError> {
        let mut g = Graph::inference();
        let mut b = Binder::new().source(&model.params, false).lora_scale(lora_scale);
        let (m, k) = Net::new(&model.config).encode(&mut g, &mut b, &mut Ctx::eval(), &[src.to_vec()])?;
        Ok(Self {
            model,
            lora_scale,
            memory: g.value(m).clone(),
            mask: g.value(k).clone(),
        })
    }

    /// Decoder over a precomputed memory (used by the bridge stage).
    pub fn from_memory(model: &'m TransformerModel<F>, memory: Tensor<F>, mask: Tensor<F>) -> Self {
        Self {
            model,
            lora_scale: 1.0,
            memory,
            mask,
        }
    }
}

fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<f64> {
    let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|&z| z - lse).collect()
}

impl<F: Scalar> StepModel for TransformerStep<'_, F> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, TransformerError> {
        let mut g = Graph::inference();
        let mut b = Binder::new().source(&self.model.params, false).lora_scale(self.lora_scale);
        let m = g.constant(self.memory.clone());
        let k = g.constant(self.mask.clone());
        let logits = Net::new(&self.model.config).decode(&mut g, &mut b, &mut Ctx::eval(), m, k, &[prefix.to_vec()])?;
        let v = self.model.config.vocab_size;
        let data = g.value(logits).data();
        Ok(log_softmax_row(&data[data.len() - v..]))
    }
}

/// Greedy decoding of a whole batch at once, one forward per step.
pub fn greedy_batch<F: Scalar>(
    model: &TransformerModel<F>,
    lora_scale: f64,
    srcs: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>, TransformerError> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::inference();
    let mut b = Binder::new().source(&model.params, false).lora_scale(lora_scale);
    let (memory, mask) = Net::new(&model.config).encode(&mut g, &mut b, &mut Ctx::eval(), srcs)?;
    greedy_from_memory(model, lora_scale, g.value(memory), g.value(mask), max_len)
}

/// Batched greedy decoding over encoder states `[B, S, D]` with key mask
/// `[B, 1, 1, S]`. Returns generated ids without bos and eos.
pub fn greedy_from_memory<F: Scalar>(
    model: &TransformerModel<F>,
    lora_scale: f64,
    memory: &Tensor<F>,
    mask: &Tensor<F>,
    max_len: usize,
) -> Result<Vec<Vec<usize>>, TransformerError> {
    let n = memory.shape()[0];
    let net = Net::new(&model.config);
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS_ID]; n];
    let mut done = vec![false; n];
    let v = model.config.vocab_size;
    let cap = max_len.min(model.config.max_len - 1);
    for _ in 0..cap {
        let mut g = Graph::inference();
        let mut b = Binder::new().source(&model.params, false).lora_scale(lora_scale);
        let m = g.constant(memory.clone());
        let k = g.constant(mask.clone());
        let logits = net.decode(&mut g, &mut b, &mut Ctx::eval(), m, k, &prefixes)?;
        let data = g.value(logits).data();
        let t = prefixes[0].len();
        for (i, p) in prefixes.iter_mut().enumerate() {
            if done[i] {
                p.push(EOS_ID);
                continue;
            }
            let row = &data[(i * t + t - 1) * v..(i * t + t) * v];
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            p.push(best);
            done[i] = best == EOS_ID;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(prefixes
        .into_iter()
        .map(|p| {
            let body = &p[1..];
            let end = body.iter().position(|&t| t == EOS_ID).unwrap_or(body.len());
            body[..end].to_vec()
        })
        .collect())
}
