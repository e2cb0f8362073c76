use lowres_mt::bpe::{BOS_ID, EOS_ID};
use lowres_mt::transformer::{
    beam_search, build_model, greedy_decode, Hypothesis, StepModel, TransformerConfig, TransformerError, TransformerStep,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const A: usize = 4;
pub const B: usize = 5;
pub const TOY_VOCAB: usize = 6;
pub const TOY_MAX_LEN: usize = 3;

/// Three live tokens {a, b, eos} with a fixed bigram table. Greedy takes
/// `a` first, but `b eos` is the most probable sequence.
pub struct Toy;

impl Toy {
    pub fn probs(last: usize) -> [(usize, f64); 3] {
        match last {
            BOS_ID => [(A, 0.5), (B, 0.4), (EOS_ID, 0.1)],
            A => [(A, 0.35), (B, 0.35), (EOS_ID, 0.3)],
            _ => [(A, 0.05), (B, 0.05), (EOS_ID, 0.9)],
        }
    }
}

impl StepModel for Toy {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>, TransformerError> {
        let mut lp = vec![f64::NEG_INFINITY; TOY_VOCAB];
        for (t, p) in Self::probs(*prefix.last().unwrap()) {
            lp[t] = p.ln();
        }
        Ok(lp)
    }
}

/// Every finished sequence of the toy (ends in eos or reaches the cap)
/// with its log probability.
pub fn enumerate(max_len: usize) -> Vec<(Vec<usize>, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![BOS_ID], 0.0)];
    while let Some((seq, lp)) = stack.pop() {
        for (t, p) in Toy::probs(*seq.last().unwrap()) {
            let mut next = seq.clone();
            next.push(t);
            let lp = lp + p.ln();
            if t == EOS_ID || next.len() - 1 == max_len {
                out.push((next, lp));
            } else {
                stack.push((next, lp));
            }
        }
    }
    out
}

/// Exhaustive optimum under `log_prob / len^alpha` (ties: shorter, then
/// smaller ids).
pub fn exhaustive_best(max_len: usize, alpha: f64) -> Vec<usize> {
    let score = |s: &(Vec<usize>, f64)| s.1 / ((s.0.len() - 1) as f64).powf(alpha);
    enumerate(max_len)
        .into_iter()
        .max_by(|x, y| {
            score(x)
                .total_cmp(&score(y))
                .then_with(|| y.0.len().cmp(&x.0.len()))
                .then_with(|| y.0.cmp(&x.0))
        })
        .unwrap()
        .0
}

/// Greedy and width-1 beam outputs for `n` random sources over small random
/// models.
pub fn greedy_vs_width_one(n: usize, seed: u64) -> Vec<(Hypothesis, Hypothesis)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let per_model = 10;
    for m in 0..n.div_ceil(per_model) {
        let mut c = TransformerConfig::t1_quarter(12);
        c.num_layers = 1;
        c.max_len = 16;
        let model = build_model::<f32>(&c, seed * 1000 + m as u64).unwrap();
        for _ in 0..per_model.min(n - out.len()) {
            let len = rng.random_range(1..8);
            let mut src: Vec<usize> = (0..len).map(|_| rng.random_range(4..12)).collect();
            src.push(EOS_ID);
            let mut step = TransformerStep::new(&model, &src).unwrap();
            let g = greedy_decode(&mut step, 10).unwrap();
            let b = beam_search(&mut step, 1, 10, 1.0).unwrap();
            out.push((g, b));
        }
    }
    out
}
