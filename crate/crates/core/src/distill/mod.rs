//! Teacher–student sentence-embedding distillation and the bridge/decoder
//! stage that turns the distilled encoder into a translator.
//!
//! The distillation loss over a batch `B` is
//! `(1/|B|) Σ_j ‖TM(s_j) − SM(s_j)‖² + ‖TM(s_j) − SM(t_j)‖²`, where `TM`
//! is the frozen teacher, `SM` the student, `s_j` a source sentence and
//! `t_j` its translation.

mod bridge;
mod mixture;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LrSchedule, OptimizerConfig, OptimizerState, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::bpe::{BpeModel, Vocabulary, PAD_ID};
use crate::corpus::{ParallelCorpus, SentencePair};
use crate::seed;
use crate::transformer::{
    build_model, encode_source, fit, make_example, Binder, Ctx, Example, FitOptions, Net, Parts, TransformerConfig,
    TransformerError, TransformerModel,
};

pub use bridge::{train_bridge_decoder, Bridge, BridgeConfig, BridgeOutcome, BridgeRecord};
pub use mixture::MixtureSampler;

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("embedding dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("cannot embed an empty token sequence")]
    EmptyTokens,
    #[error("frozen {0} parameters changed during training")]
    FrozenMutated(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] TransformerError),
}

impl From<TensorError> for DistillError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

/// How the squared difference of two embeddings is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Sum of squared components.
    #[default]
    SumSquares,
    /// Mean of squared components.
    MeanSquares,
}

/// `[B, 1, S]` weights averaging the non-pad positions of each row.
fn pool_weights<F: Scalar>(seqs: &[Vec<usize>]) -> Tensor<F> {
    let s = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut data = Vec::with_capacity(seqs.len() * s);
    for q in seqs {
        let n = q.iter().filter(|&&t| t != PAD_ID).count().max(1);
        for i in 0..s {
            let keep = i < q.len() && q[i] != PAD_ID;
            data.push(if keep { F::of(1.0 / n as f64) } else { F::zero() });
        }
    }
    Tensor::new(&[seqs.len(), 1, s], data).expect("pool shape")
}

/// Unit-length sentence embeddings `[B, D]`: masked mean of the final
/// encoder states, then L2 normalization.
pub fn embed_batch<F: Scalar>(
    config: &TransformerConfig,
    g: &mut Graph<F>,
    binder: &mut Binder<F>,
    ctx: &mut Ctx,
    seqs: &[Vec<usize>],
) -> Result<Var, DistillError> {
    if seqs.iter().any(|s| s.iter().all(|&t| t == PAD_ID)) {
        return Err(DistillError::EmptyTokens);
    }
    let (states, _) = Net::new(config).encode(g, binder, ctx, seqs)?;
    let w = g.constant(pool_weights(seqs));
    let pooled = g.matmul(w, states)?;
    let pooled = g.reshape(pooled, &[seqs.len(), config.d_model])?;
    Ok(g.l2_normalize(pooled)?)
}

/// Embedding of one token sequence (ids, typically ending with eos).
pub fn sentence_embed<F: Scalar>(encoder: &TransformerModel<F>, tokens: &[usize]) -> Result<Vec<f64>, DistillError> {
    if tokens.is_empty() {
        return Err(DistillError::EmptyTokens);
    }
    Ok(embed_all(encoder, &[tokens.to_vec()])?.remove(0))
}

/// Embeddings of many sequences, in chunks.
pub fn embed_all<F: Scalar>(encoder: &TransformerModel<F>, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>, DistillError> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let mut g = Graph::inference();
        let mut b = Binder::new().source(&encoder.params, false);
        let e = embed_batch(&encoder.config, &mut g, &mut b, &mut Ctx::eval(), chunk)?;
        let d = encoder.config.d_model;
        out.extend(g.value(e).data().chunks(d).map(|r| r.iter().map(|x| x.as_f64()).collect()));
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64], norm: LossNorm) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match norm {
        LossNorm::SumSquares => s,
        LossNorm::MeanSquares => s / a.len().max(1) as f64,
    }
}

/// Loss terms per pair: (‖TM(s)−SM(s)‖², ‖TM(s)−SM(t)‖²).
pub fn distill_terms(
    tm_s: &[Vec<f64>],
    sm_s: &[Vec<f64>],
    sm_t: &[Vec<f64>],
    norm: LossNorm,
) -> Result<Vec<(f64, f64)>, DistillError> {
    if tm_s.is_empty() || tm_s.len() != sm_s.len() || tm_s.len() != sm_t.len() {
        return Err(DistillError::Config(format!(
            "batch sizes {}, {}, {} must be equal and positive",
            tm_s.len(),
            sm_s.len(),
            sm_t.len()
        )));
    }
    tm_s.iter()
        .zip(sm_s)
        .zip(sm_t)
        .map(|((a, b), c)| {
            if a.len() != b.len() {
                return Err(DistillError::Dimension(a.len(), b.len()));
            }
            if a.len() != c.len() {
                return Err(DistillError::Dimension(a.len(), c.len()));
            }
            Ok((sq_dist(a, b, norm), sq_dist(a, c, norm)))
        })
        .collect()
}

/// Batch-averaged distillation loss on precomputed embeddings.
pub fn distill_loss(tm_s: &[Vec<f64>], sm_s: &[Vec<f64>], sm_t: &[Vec<f64>], norm: LossNorm) -> Result<f64, DistillError> {
    let terms = distill_terms(tm_s, sm_s, sm_t, norm)?;
    Ok(terms.iter().map(|(a, b)| a + b).sum::<f64>() / terms.len() as f64)
}

/// Differentiable form of [`distill_loss`] over `[B, D]` embeddings.
pub fn distill_loss_graph<F: Scalar>(
    g: &mut Graph<F>,
    tm_s: Var,
    sm_s: Var,
    sm_t: Var,
    norm: LossNorm,
) -> Result<Var, DistillError> {
    let (ts, ss, st) = (g.shape(tm_s).to_vec(), g.shape(sm_s).to_vec(), g.shape(sm_t).to_vec());
    if ts != ss {
        return Err(DistillError::Dimension(ts[ts.len() - 1], ss[ss.len() - 1]));
    }
    if ts != st {
        return Err(DistillError::Dimension(ts[ts.len() - 1], st[st.len() - 1]));
    }
    let (b, d) = (ts[0], ts[1]);
    let d1 = g.sub(tm_s, sm_s)?;
    let d2 = g.sub(tm_s, sm_t)?;
    let q1 = g.mul(d1, d1)?;
    let q2 = g.mul(d2, d2)?;
    let total = g.add(q1, q2)?;
    let s = g.sum(total);
    let denom = match norm {
        LossNorm::SumSquares => b as f64,
        LossNorm::MeanSquares => (b * d) as f64,
    };
    Ok(g.scale(s, F::of(1.0 / denom)))
}

/// Cosine of each pair's source and target embedding.
pub fn cross_lingual_cosine<F: Scalar>(
    student: &TransformerModel<F>,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    corpus: &ParallelCorpus,
) -> Result<Vec<f64>, DistillError> {
    let max_len = student.config.max_len;
    let src: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| encode_source(bpe, vocab, &p.src, max_len)).collect();
    let tgt: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| encode_source(bpe, vocab, &p.tgt, max_len)).collect();
    let es = embed_all(student, &src)?;
    let et = embed_all(student, &tgt)?;
    Ok(es
        .iter()
        .zip(&et)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn default_teacher_lr() -> f64 {
    1e-3
}
fn default_teacher_batch() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sentences per batch.
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub loss_norm: LossNorm,
    /// Epochs of copy-task pretraining for the teacher.
    #[serde(default)]
    pub teacher_epochs: usize,
    #[serde(default = "default_teacher_lr")]
    pub teacher_lr: f64,
    #[serde(default = "default_teacher_batch")]
    pub teacher_token_batch_size: usize,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.batch_size == 0 {
            return Err(DistillError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.teacher_lr > 0.0 && self.teacher_lr.is_finite()) {
            return Err(DistillError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        let mut c = OptimizerConfig::adamw();
        if let Some(wd) = self.weight_decay {
            c.weight_decay = wd;
        }
        c
    }
}

/// Encoder pretrained on a copy objective over `sentences`, returned
/// without its decoder.
pub fn pretrain_teacher<F: Scalar>(
    config: &TransformerConfig,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    sentences: &[String],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<TransformerModel<F>, DistillError> {
    let full = build_model::<F>(config, seed::derive(seed, "teacher", 0))?;
    let TransformerModel { config, mut params, .. } = full;
    if cfg.teacher_epochs > 0 {
        let examples: Vec<Example> = sentences
            .iter()
            .map(|s| make_example(bpe, vocab, &SentencePair::new(s.as_str(), s.as_str()), config.max_len))
            .collect();
        let opts = FitOptions {
            epochs: cfg.teacher_epochs,
            token_batch_size: cfg.teacher_token_batch_size.max(2 * config.max_len),
            patience: None,
            validate_every: cfg.teacher_epochs,
            optimizer: OptimizerConfig::adam(),
            seed: seed::derive(seed, "teacher", 1),
        };
        fit(
            &config,
            None,
            &mut params,
            1.0,
            &examples,
            &opts,
            |_| LrSchedule::Constant { base_lr: cfg.teacher_lr },
            |_| Ok((0.0, 0.0)),
            |_| {},
        )?;
    }
    let enc: ParamSet<F> = params
        .iter()
        .filter(|(k, _)| k.as_str() == "emb" || k.starts_with("enc."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    Ok(TransformerModel::from_params(
        crate::transformer::ModelSpec {
            config,
            parts: Parts::ENCODER,
        },
        enc,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mean_cosine: f64,
}

pub struct DistillOutcome<F> {
    pub student: TransformerModel<F>,
    /// Epoch 0 holds the measurements before any update.
    pub history: Vec<DistillRecord>,
    pub teacher_hash: String,
}

/// Aligns `student` with the frozen `teacher` on both sides of `corpus`.
#[allow(clippy::too_many_arguments)]
pub fn train_distill<F: Scalar>(
    teacher: &TransformerModel<F>,
    mut student: TransformerModel<F>,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    corpus: &ParallelCorpus,
    cfg: &DistillConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&DistillRecord),
) -> Result<DistillOutcome<F>, DistillError> {
    cfg.validate()?;
    if teacher.config.d_model != student.config.d_model {
        return Err(DistillError::Dimension(teacher.config.d_model, student.config.d_model));
    }
    if corpus.is_empty() {
        return Err(DistillError::Config("empty distillation corpus".into()));
    }
    let teacher_hash = teacher.params.content_hash();
    let max_len = student.config.max_len;
    let src: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| encode_source(bpe, vocab, &p.src, max_len)).collect();
    let tgt: Vec<Vec<usize>> = corpus.pairs.iter().map(|p| encode_source(bpe, vocab, &p.tgt, max_len)).collect();
    let tm: Vec<Vec<f64>> = embed_all(teacher, &src)?;
    let d = teacher.config.d_model;

    let measure = |student: &TransformerModel<F>| -> Result<(f64, f64), DistillError> {
        let ss = embed_all(student, &src)?;
        let st = embed_all(student, &tgt)?;
        let loss = distill_loss(&tm, &ss, &st, cfg.loss_norm)?;
        let cos: Vec<f64> = ss.iter().zip(&st).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect();
        Ok((loss, mean(&cos)))
    };
    let (loss0, cos0) = measure(&student)?;
    let rec = DistillRecord {
        epoch: 0,
        loss: loss0,
        mean_cosine: cos0,
    };
    on_epoch(&rec);
    let mut history = vec![rec];

    let mut opt = OptimizerState::new(cfg.optimizer());
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, "distill-shuffle", epoch as u64)));
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let bs: Vec<Vec<usize>> = batch.iter().map(|&i| src[i].clone()).collect();
            let bt: Vec<Vec<usize>> = batch.iter().map(|&i| tgt[i].clone()).collect();
            let tm_rows: Vec<F> = batch.iter().flat_map(|&i| tm[i].iter().map(|&x| F::of(x))).collect();
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut b = Binder::new().source(&student.params, true);
                let tmv = g.constant(Tensor::new(&[batch.len(), d], tm_rows)?);
                let mut ctx = Ctx::train(seed, step, true);
                let ss = embed_batch(&student.config, &mut g, &mut b, &mut ctx, &bs)?;
                let st = embed_batch(&student.config, &mut g, &mut b, &mut ctx, &bt)?;
                let loss = distill_loss_graph(&mut g, tmv, ss, st, cfg.loss_norm)?;
                let value = g.value(loss).item().as_f64();
                g.backward(loss)?;
                (value, b.grads(&g))
            };
            if !loss.is_finite() {
                return Err(TransformerError::NonFinite(format!("distillation loss {loss} at epoch {epoch}")).into());
            }
            opt.step(&mut student.params, &grads, cfg.lr)?;
            step += 1;
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let (_, cos) = measure(&student)?;
        let rec = DistillRecord {
            epoch,
            loss: loss_sum / count as f64,
            mean_cosine: cos,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    if teacher.params.content_hash() != teacher_hash {
        return Err(DistillError::FrozenMutated("teacher"));
    }
    Ok(DistillOutcome {
        student,
        history,
        teacher_hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub dim: usize,
    pub count: usize,
    pub language: String,
}

/// Writes rows as little-endian f32 to `path` and `{dim, count, language}`
/// to `path` with `.json` appended.
pub fn write_embeddings(path: impl AsRef<Path>, rows: &[Vec<f64>], language: &str) -> Result<EmbeddingMeta, DistillError> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(DistillError::Dimension(dim, r.len()));
    }
    let mut bytes = Vec::with_capacity(rows.len() * dim * 4);
    for r in rows {
        for &x in r {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let io = |source| DistillError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(path, bytes).map_err(io)?;
    let meta = EmbeddingMeta {
        dim,
        count: rows.len(),
        language: language.to_string(),
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    fs::write(&side, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io)?;
    Ok(meta)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(EmbeddingMeta, Vec<Vec<f64>>), DistillError> {
    let path = path.as_ref();
    let io = |source| DistillError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let meta: EmbeddingMeta = serde_json::from_str(&fs::read_to_string(&side).map_err(io)?)
        .map_err(|e| DistillError::Config(format!("bad embedding sidecar: {e}")))?;
    let bytes = fs::read(path).map_err(io)?;
    if bytes.len() != meta.dim * meta.count * 4 {
        return Err(DistillError::Config(format!(
            "embedding file has {} bytes, expected {}",
            bytes.len(),
            meta.dim * meta.count * 4
        )));
    }
    let rows = bytes
        .chunks(4 * meta.dim.max(1))
        .take(meta.count)
        .map(|r| r.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
        .collect();
    Ok((meta, rows))
}
