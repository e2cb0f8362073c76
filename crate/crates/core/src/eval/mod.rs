//! Corpus BLEU and chrF, and embedding-space analysis (PCA projection and
//! cosine-similarity histograms) with CSV/JSON export.

mod analysis;
mod metrics;

pub use analysis::{
    cosine, cosine_hist, histogram_csv, pca2, projections_csv, CosineHistogram, PcaResult, DEFAULT_BINS,
    PCA_MAX_ITER, PCA_TOL,
};
pub use metrics::{
    bleu, bleu_with, chrf, chrf_stats, evaluate, ChrfStats, EvalReport, SentenceScore, Smoothing,
    BLEU_MAX_ORDER, CHRF_BETA, CHRF_MAX_ORDER,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no hypotheses to score")]
    Empty,
    #[error("{0} hypotheses but {1} references")]
    LengthMismatch(usize, usize),
    #[error("{0}")]
    Shape(String),
}
