use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

pub const PCA_TOL: f64 = 1e-9;
pub const PCA_MAX_ITER: usize = 1000;
pub const DEFAULT_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// One `[x, y]` row per input row.
    pub projections: Vec<[f64; 2]>,
    pub explained_variance_ratio: [f64; 2],
    pub components: [Vec<f64>; 2],
    /// Set when the data has fewer than two directions of variance.
    pub second_degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    /// Pairs excluded because one side was a zero vector.
    pub flagged: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn matvec(m: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    m.chunks(d).map(|row| dot(row, v)).collect()
}

/// Leading eigenpair of the symmetric `d×d` matrix `m`.
fn power_iteration(m: &[f64], d: usize, seed: u64) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..PCA_MAX_ITER {
        let mut w = matvec(m, d, &v);
        let n = norm(&w);
        if n == 0.0 {
            return (0.0, v);
        }
        w.iter_mut().for_each(|x| *x /= n);
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if diff < PCA_TOL {
            break;
        }
    }
    let lambda = dot(&v, &matvec(m, d, &v));
    (lambda, v)
}

fn fix_sign(v: &mut [f64]) {
    let big = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Two-component PCA of the rows of `x` by power iteration with deflation.
pub fn pca2(x: &[Vec<f64>]) -> Result<PcaResult, EvalError> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if n < 3 || d < 2 {
        return Err(EvalError::Shape(format!("pca2 needs at least 3 rows and 2 columns, got {n}×{d}")));
    }
    if x.iter().any(|r| r.len() != d) {
        return Err(EvalError::Shape("ragged embedding matrix".into()));
    }
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let (l1, mut v1) = power_iteration(&cov, d, 1);
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (mut l2, mut v2) = power_iteration(&cov, d, 2);
    // Re-orthogonalize against the first component.
    let c = dot(&v1, &v2);
    v2.iter_mut().zip(&v1).for_each(|(a, b)| *a -= c * b);
    let n2 = norm(&v2);
    let second_degenerate = trace <= 0.0 || l2 <= 1e-12 * trace.max(f64::MIN_POSITIVE) || n2 < 1e-6;
    if n2 > 0.0 {
        v2.iter_mut().for_each(|a| *a /= n2);
    }
    if second_degenerate {
        l2 = l2.max(0.0);
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    let projections = centred.iter().map(|r| [dot(r, &v1), dot(r, &v2)]).collect();
    let ratio = |l: f64| if trace > 0.0 { l / trace } else { 0.0 };
    Ok(PcaResult {
        projections,
        explained_variance_ratio: [ratio(l1), ratio(l2)],
        components: [v1, v2],
        second_degenerate,
    })
}

/// Histogram of per-pair cosine similarity over `bins` equal bins of
/// `[-1, 1]` (the last bin is closed).
pub fn cosine_hist(src: &[Vec<f64>], tgt: &[Vec<f64>], bins: usize) -> Result<CosineHistogram, EvalError> {
    if src.len() != tgt.len() {
        return Err(EvalError::LengthMismatch(src.len(), tgt.len()));
    }
    if bins == 0 {
        return Err(EvalError::Shape("histogram needs at least one bin".into()));
    }
    let mut values = Vec::with_capacity(src.len());
    let mut flagged = 0;
    for (a, b) in src.iter().zip(tgt) {
        if a.len() != b.len() {
            return Err(EvalError::Shape(format!("embedding dimensions {} and {} differ", a.len(), b.len())));
        }
        match cosine(a, b) {
            Some(c) => values.push(c),
            None => flagged += 1,
        }
    }
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &c in &values {
        let i = (((c + 1.0) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let mean = if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    values.sort_by(f64::total_cmp);
    let median = match values.len() {
        0 => 0.0,
        k if k % 2 == 1 => values[k / 2],
        k => 0.5 * (values[k / 2 - 1] + values[k / 2]),
    };
    Ok(CosineHistogram {
        edges,
        counts,
        mean,
        median,
        flagged,
    })
}

/// `x,y,label` rows with a header.
pub fn projections_csv(pca: &PcaResult, labels: &[String]) -> String {
    let mut s = String::from("x,y,label\n");
    for (i, p) in pca.projections.iter().enumerate() {
        let label = labels.get(i).map(String::as_str).unwrap_or("");
        s.push_str(&format!("{},{},{}\n", p[0], p[1], label));
    }
    s
}

/// `lo,hi,count` rows with a header.
pub fn histogram_csv(h: &CosineHistogram) -> String {
    let mut s = String::from("lo,hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        s.push_str(&format!("{},{},{}\n", h.edges[i], h.edges[i + 1], c));
    }
    s
}
