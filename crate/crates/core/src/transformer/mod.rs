//! Encoder–decoder Transformer (pre-norm blocks, sinusoidal positions,
//! tied output projection) with a token-batched trainer and greedy/beam
//! decoding.

mod config;
mod decode;
mod model;
mod train;

pub use config::{Architecture, TransformerConfig, DEFAULT_MAX_LEN};
pub use decode::{beam_search, greedy_batch, greedy_decode, greedy_from_memory, Hypothesis, StepModel, TransformerStep};
pub use model::{
    build_model, build_parts, causal_mask, forward, key_pad_mask, pad_batch, param_shapes, positional_encoding,
    Binder, Ctx, ModelSpec, Net, Parts, TransformerModel, ATTN_PROJ, MASK_VALUE,
};
pub use train::{
    batch_loss, encode_source, encode_text, fit, load_model, make_example, token_batches, train, translate,
    DecodeConfig, EarlyStopping, Example, FitOptions, FitResult, HistoryRecord, TrainConfig, TrainOutcome,
    ValidationSet, DEFAULT_PATIENCE,
};

use crate::autodiff::TensorError;
use crate::eval::EvalError;

#[derive(Debug, thiserror::Error)]
pub enum TransformerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
