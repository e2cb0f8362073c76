use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DistillError;
use crate::corpus::ParallelCorpus;
use crate::seed;

/// Draws pairs from several corpora in fixed proportions.
#[derive(Clone, Debug)]
pub struct MixtureSampler {
    sources: Vec<(ParallelCorpus, f64)>,
}

impl MixtureSampler {
    pub fn new(sources: Vec<(ParallelCorpus, f64)>) -> Result<Self, DistillError> {
        if sources.is_empty() {
            return Err(DistillError::Config("mixture needs at least one corpus".into()));
        }
        if sources.iter().any(|(c, w)| !(w.is_finite() && *w >= 0.0) || (*w > 0.0 && c.is_empty())) {
            return Err(DistillError::Config("mixture weights must be non-negative and weighted corpora non-empty".into()));
        }
        let total: f64 = sources.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return Err(DistillError::Config("mixture weights sum to zero".into()));
        }
        Ok(Self { sources })
    }

    /// Pairs per corpus for a sample of `n` (largest remainder, earlier
    /// corpora first on ties).
    pub fn allocation(&self, n: usize) -> Vec<usize> {
        let total: f64 = self.sources.iter().map(|(_, w)| w).sum();
        let exact: Vec<f64> = self.sources.iter().map(|(_, w)| n as f64 * w / total).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..counts.len()).collect();
        rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = n - counts.iter().sum::<usize>();
        for &i in rest.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }

    /// `n` pairs mixed by weight; corpora are cycled if too small.
    pub fn sample(&self, n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "mixture", 0));
        let mut pairs = Vec::with_capacity(n);
        for ((corpus, _), k) in self.sources.iter().zip(self.allocation(n)) {
            let mut idx: Vec<usize> = (0..corpus.len()).collect();
            idx.shuffle(&mut rng);
            pairs.extend(idx.iter().cycle().take(k).map(|&i| corpus.pairs[i].clone()));
        }
        pairs.shuffle(&mut rng);
        let first = &self.sources[0].0;
        let same = |f: fn(&ParallelCorpus) -> &str| self.sources.iter().all(|(c, _)| f(c) == f(first));
        let src_lang = if same(|c| &c.src_lang) { first.src_lang.clone() } else { "mixed".into() };
        let tgt_lang = if same(|c| &c.tgt_lang) { first.tgt_lang.clone() } else { "mixed".into() };
        ParallelCorpus::new(src_lang, tgt_lang, pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SentencePair;

    fn corpus(lang: &str, n: usize) -> ParallelCorpus {
        let pairs = (0..n).map(|i| SentencePair::new(format!("{lang}{i}"), "t")).collect();
        ParallelCorpus::new(lang, "bm", pairs)
    }

    #[test]
    fn half_and_half() {
        let m = MixtureSampler::new(vec![(corpus("en", 10), 0.5), (corpus("fr", 30), 0.5)]).unwrap();
        assert_eq!(m.allocation(21), vec![11, 10]);
        let s = m.sample(20, 3);
        assert_eq!(s.pairs.iter().filter(|p| p.src.starts_with("en")).count(), 10);
        assert_eq!(s.src_lang, "mixed");
        assert_eq!(s.tgt_lang, "bm");
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(MixtureSampler::new(vec![(corpus("en", 3), -1.0)]).is_err());
        assert!(MixtureSampler::new(vec![(corpus("en", 3), 0.0)]).is_err());
    }
}
