use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decode::{beam_search, greedy_batch, TransformerStep};
use super::model::{Binder, Ctx, Net, TransformerModel};
use super::{Architecture, TransformerConfig, TransformerError, DEFAULT_MAX_LEN};
use crate::autodiff::{
    Checkpoint, Graph, LrSchedule, OptimizerConfig, OptimizerKind, OptimizerState, ParamSet, Scalar, ScheduleKind,
    TensorError,
};
use crate::bpe::{decode_bpe, BpeModel, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::corpus::{normalize_text, SentencePair, SplitCorpus};
use crate::eval;
use crate::seed;

pub const DEFAULT_PATIENCE: usize = 4;

fn default_patience() -> usize {
    DEFAULT_PATIENCE
}
fn default_lr_patience() -> usize {
    2
}
fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}
fn default_one() -> usize {
    1
}
fn default_label_smoothing() -> f64 {
    0.1
}
fn default_alpha() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Plateau
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

/// Trainer settings. The first nine keys are required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model_architecture: String,
    pub embedding_dimension: usize,
    pub epochs: usize,
    pub token_batch_size: usize,
    pub beam_width: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub lr_decrease_factor: f64,
    pub dropout: f64,

    /// Defaults to four times the embedding dimension.
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default)]
    pub num_layers: Option<usize>,
    #[serde(default)]
    pub num_heads: Option<usize>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_true")]
    pub tie_softmax: bool,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    /// Validations without improvement before a plateau decay.
    #[serde(default = "default_lr_patience")]
    pub lr_patience: usize,
    /// Half period of the cyclic schedule, in optimizer steps.
    #[serde(default)]
    pub cyclic_step_size: Option<u64>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    /// Validate every this many epochs.
    #[serde(default = "default_one")]
    pub validate_every: usize,
    #[serde(default = "default_alpha")]
    pub length_alpha: f64,
}

impl TrainConfig {
    pub fn architecture(&self) -> Result<Architecture, TransformerError> {
        self.model_architecture.parse()
    }

    pub fn validate(&self) -> Result<(), TransformerError> {
        let err = |m: String| Err(TransformerError::Config(m));
        self.architecture()?;
        if self.epochs == 0 {
            return err("epochs must be positive".into());
        }
        if self.token_batch_size < 2 * self.max_len {
            return err(format!(
                "token_batch_size {} must be at least twice max_len {}",
                self.token_batch_size, self.max_len
            ));
        }
        if self.beam_width == 0 {
            return err("beam_width must be at least 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return err(format!("lr_initial {} must be positive", self.lr_initial));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_initial) {
            return err(format!("lr_min {} must lie in [0, lr_initial]", self.lr_min));
        }
        if !(self.lr_decrease_factor > 0.0 && self.lr_decrease_factor <= 1.0) {
            return err(format!("lr_decrease_factor {} must lie in (0, 1]", self.lr_decrease_factor));
        }
        if self.patience == 0 || self.validate_every == 0 {
            return err("patience and validate_every must be positive".into());
        }
        if self.schedule == ScheduleKind::Cyclic && self.cyclic_step_size.unwrap_or(0) == 0 {
            return err("cyclic schedule needs a positive cyclic_step_size".into());
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<TransformerConfig, TransformerError> {
        let (layers, heads, _, _) = self.architecture()?.dims();
        let c = TransformerConfig {
            num_layers: self.num_layers.unwrap_or(layers),
            num_heads: self.num_heads.unwrap_or(heads),
            d_model: self.embedding_dimension,
            d_ff: self.d_ff.unwrap_or(4 * self.embedding_dimension),
            dropout: self.dropout,
            vocab_size,
            max_len: self.max_len,
            tie_softmax: self.tie_softmax,
            label_smoothing: self.label_smoothing,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let mut c = match self.optimizer {
            OptimizerKind::Adam => OptimizerConfig::adam(),
            OptimizerKind::AdamW => OptimizerConfig::adamw(),
        };
        if let Some(wd) = self.weight_decay {
            c.weight_decay = wd;
        }
        c
    }

    pub fn lr_schedule(&self, total_steps: u64) -> LrSchedule {
        match self.schedule {
            ScheduleKind::Constant => LrSchedule::Constant { base_lr: self.lr_initial },
            ScheduleKind::Linear => LrSchedule::Linear {
                base_lr: self.lr_initial,
                min_lr: self.lr_min,
                total_steps,
            },
            ScheduleKind::Plateau => LrSchedule::Plateau {
                base_lr: self.lr_initial,
                min_lr: self.lr_min,
                decrease_factor: self.lr_decrease_factor,
                patience: self.lr_patience,
            },
            ScheduleKind::Cyclic => LrSchedule::Cyclic {
                min_lr: self.lr_min,
                max_lr: self.lr_initial,
                step_size: self.cyclic_step_size.unwrap_or(1),
            },
        }
    }
}

/// One training pair as id sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Subword ids followed by eos.
    pub src: Vec<usize>,
    /// bos followed by subword ids.
    pub tgt_in: Vec<usize>,
    /// Subword ids followed by eos.
    pub tgt_out: Vec<usize>,
}

impl Example {
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt_out.len()
    }
}

/// Subword ids of `text`, truncated so that one special fits in `max_len`.
pub fn encode_text(bpe: &BpeModel, vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.encode(&bpe.apply(&normalize_text(text)));
    ids.truncate(max_len.saturating_sub(1));
    ids
}

pub fn encode_source(bpe: &BpeModel, vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = encode_text(bpe, vocab, text, max_len);
    ids.push(EOS_ID);
    ids
}

pub fn make_example(bpe: &BpeModel, vocab: &Vocabulary, pair: &SentencePair, max_len: usize) -> Example {
    let t = encode_text(bpe, vocab, &pair.tgt, max_len);
    let mut tgt_in = vec![BOS_ID];
    tgt_in.extend(&t);
    let mut tgt_out = t;
    tgt_out.push(EOS_ID);
    Example {
        src: encode_source(bpe, vocab, &pair.src, max_len),
        tgt_in,
        tgt_out,
    }
}

/// Groups example indices in the given order; a batch closes when the
/// next example would push its source+target token count past `limit`.
pub fn token_batches(examples: &[Example], order: &[usize], limit: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut count = 0;
    for &i in order {
        let n = examples[i].tokens();
        if !cur.is_empty() && count + n > limit {
            out.push(std::mem::take(&mut cur));
            count = 0;
        }
        cur.push(i);
        count += n;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Stops after `patience` consecutive validations without improvement.
/// Scores compare by BLEU, then chrF.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(f64, f64)>,
    stale: usize,
    improvements: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
            improvements: 0,
        }
    }

    /// Records a validation; returns true when it improved on the best.
    pub fn observe(&mut self, bleu: f64, chrf: f64) -> bool {
        let better = match self.best {
            None => true,
            Some((b, c)) => bleu > b || (bleu == b && chrf > c),
        };
        if better {
            self.best = Some((bleu, chrf));
            self.stale = 0;
            self.improvements += 1;
        } else {
            self.stale += 1;
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn stale(&self) -> usize {
        self.stale
    }

    /// Improvement counter, usable as a plateau-schedule score history.
    pub fn improvements(&self) -> usize {
        self.improvements
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_bleu: Option<f64>,
    pub val_chrf: Option<f64>,
    pub lr: f64,
}

/// Validation data: source ids and reference text.
pub struct ValidationSet<'v> {
    pub src: Vec<Vec<usize>>,
    pub refs: Vec<String>,
    pub vocab: &'v Vocabulary,
}

impl<'v> ValidationSet<'v> {
    pub fn new(bpe: &BpeModel, vocab: &'v Vocabulary, pairs: &[SentencePair], max_len: usize) -> Self {
        Self {
            src: pairs.iter().map(|p| encode_source(bpe, vocab, &p.src, max_len)).collect(),
            refs: pairs.iter().map(|p| normalize_text(&p.tgt)).collect(),
            vocab,
        }
    }

    /// Greedy decodes every source and scores it: (BLEU, chrF).
    pub fn score<F: Scalar>(&self, model: &TransformerModel<F>, lora_scale: f64) -> Result<(f64, f64), TransformerError> {
        let hyps = self.decode(model, lora_scale)?;
        let r = eval::evaluate(&hyps, &self.refs, false)?;
        Ok((r.bleu_percent, r.chrf_score))
    }

    pub fn decode<F: Scalar>(&self, model: &TransformerModel<F>, lora_scale: f64) -> Result<Vec<String>, TransformerError> {
        let mut hyps = Vec::with_capacity(self.src.len());
        for chunk in self.src.chunks(64) {
            let longest = chunk.iter().map(Vec::len).max().unwrap_or(1);
            let cap = (2 * longest + 10).min(model.config.max_len - 1);
            for ids in greedy_batch(model, lora_scale, chunk, cap)? {
                hyps.push(decode_bpe(&self.vocab.decode(&ids)));
            }
        }
        Ok(hyps)
    }
}

/// Mean cross entropy of one batch; fills gradients into the binder's
/// trainable parameters.
pub fn batch_loss<F: Scalar>(
    config: &TransformerConfig,
    binder: &mut Binder<F>,
    g: &mut Graph<F>,
    ctx: &mut Ctx,
    batch: &[&Example],
) -> Result<f64, TransformerError> {
    let src: Vec<Vec<usize>> = batch.iter().map(|e| e.src.clone()).collect();
    let tin: Vec<Vec<usize>> = batch.iter().map(|e| e.tgt_in.clone()).collect();
    let t = tin.iter().map(Vec::len).max().unwrap_or(0);
    let mut targets = Vec::with_capacity(batch.len() * t);
    for e in batch {
        targets.extend(&e.tgt_out);
        targets.extend(std::iter::repeat_n(PAD_ID, t - e.tgt_out.len()));
    }
    let logits = Net::new(config).forward(g, binder, ctx, &src, &tin)?;
    let loss = g.cross_entropy(logits, &targets, PAD_ID, config.label_smoothing)?;
    let value = g.value(loss).item().as_f64();
    g.backward(loss)?;
    Ok(value)
}

/// Settings shared by the sequence-to-sequence trainers.
pub struct FitOptions {
    pub epochs: usize,
    pub token_batch_size: usize,
    pub patience: Option<usize>,
    pub validate_every: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

pub struct FitResult<F> {
    pub history: Vec<HistoryRecord>,
    /// Trainable parameters at the best validation (or the last epoch
    /// when nothing was validated).
    pub best: ParamSet<F>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub optimizer: OptimizerState<F>,
    pub steps: u64,
}

/// Trains `trainable` (with `frozen` bound read-only) on `examples`.
///
/// `validate` receives the current trainable parameters and returns
/// (BLEU, chrF). `schedule` receives the total step count.
#[allow(clippy::too_many_arguments)]
pub fn fit<F: Scalar>(
    config: &TransformerConfig,
    frozen: Option<&ParamSet<F>>,
    trainable: &mut ParamSet<F>,
    lora_scale: f64,
    examples: &[Example],
    opts: &FitOptions,
    schedule: impl FnOnce(u64) -> LrSchedule,
    mut validate: impl FnMut(&ParamSet<F>) -> Result<(f64, f64), TransformerError>,
    mut on_epoch: impl FnMut(&HistoryRecord),
) -> Result<FitResult<F>, TransformerError> {
    if examples.is_empty() {
        return Err(TransformerError::Config("no training examples".into()));
    }
    let order: Vec<usize> = (0..examples.len()).collect();
    let per_epoch = token_batches(examples, &order, opts.token_batch_size).len() as u64;
    let schedule = schedule(per_epoch * opts.epochs as u64);
    let mut opt = OptimizerState::new(opts.optimizer);
    let mut stopper = EarlyStopping::new(opts.patience.unwrap_or(usize::MAX));
    let mut sched_history: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    let mut best = trainable.clone();
    let mut best_epoch = 0;
    let mut step = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=opts.epochs {
        let mut order = order.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, "shuffle", epoch as u64)));
        let batches = token_batches(examples, &order, opts.token_batch_size);
        let (mut loss_sum, mut tok_sum) = (0.0, 0usize);
        let mut lr = schedule.lr_at(step, &sched_history);
        for batch in &batches {
            lr = schedule.lr_at(step, &sched_history);
            let exs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let n_tok: usize = exs.iter().map(|e| e.tgt_out.len()).sum();
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut b = Binder::new().lora_scale(lora_scale);
                if let Some(f) = frozen {
                    b = b.source(f, false);
                }
                b = b.source(trainable, true);
                let mut ctx = Ctx::train(opts.seed, step, true);
                let loss = batch_loss(config, &mut b, &mut g, &mut ctx, &exs)?;
                (loss, b.grads(&g))
            };
            if !loss.is_finite() {
                return Err(TransformerError::NonFinite(format!("loss {loss} at epoch {epoch}, step {step}")));
            }
            if let Some(name) = grads.keys().find(|k| frozen.is_some_and(|f| f.contains(k))) {
                return Err(TransformerError::Integrity(format!("gradient reached frozen parameter {name}")));
            }
            opt.step(trainable, &grads, lr).map_err(|e| match e {
                TensorError::NonFiniteGradient(n) => {
                    TransformerError::NonFinite(format!("gradient of {n} at epoch {epoch}, step {step}"))
                }
                other => other.into(),
            })?;
            step += 1;
            loss_sum += loss * n_tok as f64;
            tok_sum += n_tok;
        }
        let mut rec = HistoryRecord {
            epoch,
            loss: loss_sum / tok_sum.max(1) as f64,
            val_bleu: None,
            val_chrf: None,
            lr,
        };
        if epoch % opts.validate_every == 0 || epoch == opts.epochs {
            let (bleu, chrf) = validate(trainable)?;
            rec.val_bleu = Some(bleu);
            rec.val_chrf = Some(chrf);
            if stopper.observe(bleu, chrf) {
                best = trainable.clone();
                best_epoch = epoch;
            }
            sched_history.push(stopper.improvements() as f64);
        } else if best_epoch == 0 && stopper.improvements() == 0 {
            best = trainable.clone();
            best_epoch = epoch;
        }
        on_epoch(&rec);
        history.push(rec);
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        history,
        best,
        best_epoch,
        stopped_early,
        optimizer: opt,
        steps: step,
    })
}

pub struct TrainOutcome<F> {
    pub best: TransformerModel<F>,
    pub last: TransformerModel<F>,
    /// Best model with the final optimizer moments.
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Trains `model` on `split.train`, validating with greedy decoding on
/// `split.valid` and keeping the best (BLEU, then chrF) parameters.
pub fn train<F: Scalar>(
    model: TransformerModel<F>,
    split: &SplitCorpus,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&HistoryRecord),
) -> Result<TrainOutcome<F>, TransformerError> {
    cfg.validate()?;
    if vocab.len() != model.config.vocab_size {
        return Err(TransformerError::Integrity(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let max_len = model.config.max_len;
    let examples: Vec<Example> = split.train.pairs.iter().map(|p| make_example(bpe, vocab, p, max_len)).collect();
    let valid = ValidationSet::new(bpe, vocab, &split.valid.pairs, max_len);
    let TransformerModel { config, parts, mut params } = model;
    let opts = FitOptions {
        epochs: cfg.epochs,
        token_batch_size: cfg.token_batch_size,
        patience: Some(cfg.patience),
        validate_every: cfg.validate_every,
        optimizer: cfg.optimizer_config(),
        seed,
    };
    let fit_result = fit(
        &config,
        None,
        &mut params,
        1.0,
        &examples,
        &opts,
        |total| cfg.lr_schedule(total),
        |p| {
            if valid.src.is_empty() {
                return Ok((0.0, 0.0));
            }
            let m = TransformerModel {
                config: config.clone(),
                parts,
                params: p.clone(),
            };
            valid.score(&m, 1.0)
        },
        on_epoch,
    )?;
    let best = TransformerModel {
        config: config.clone(),
        parts,
        params: fit_result.best,
    };
    let spec = serde_json::to_value(best.spec()).expect("spec serializes");
    let checkpoint = Checkpoint::new(spec, vocab.content_hash(), fit_result.steps, &best.params, Some(&fit_result.optimizer))
        .with_schedule_state(serde_json::json!({
            "best_epoch": fit_result.best_epoch,
            "stopped_early": fit_result.stopped_early,
        }));
    Ok(TrainOutcome {
        best,
        last: TransformerModel { config, parts, params },
        checkpoint,
        history: fit_result.history,
        best_epoch: fit_result.best_epoch,
        stopped_early: fit_result.stopped_early,
    })
}

/// Model and vocabulary-integrity check for a checkpoint.
pub fn load_model<F: Scalar>(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<TransformerModel<F>, TransformerError> {
    if ckpt.meta.vocab_hash != vocab.content_hash() {
        return Err(TransformerError::Integrity(
            "vocabulary does not match the one the checkpoint was trained with".into(),
        ));
    }
    let spec = serde_json::from_value(ckpt.meta.model_config.clone())
        .map_err(|e| TransformerError::Integrity(format!("bad model config in checkpoint: {e}")))?;
    TransformerModel::from_params(spec, ckpt.params())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_len: DEFAULT_MAX_LEN - 1,
            length_alpha: 1.0,
        }
    }
}

/// Source text to target text: segment, encode, beam search, detokenize.
pub fn translate<F: Scalar>(
    model: &TransformerModel<F>,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    sentence: &str,
    dc: &DecodeConfig,
) -> Result<String, TransformerError> {
    if sentence.split_whitespace().next().is_none() {
        return Ok(String::new());
    }
    if vocab.len() != model.config.vocab_size {
        return Err(TransformerError::Integrity(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let src = encode_source(bpe, vocab, sentence, model.config.max_len);
    let mut step = TransformerStep::new(model, &src)?;
    let cap = dc.max_len.min(model.config.max_len - 1);
    let h = beam_search(&mut step, dc.beam_width, cap, dc.length_alpha)?;
    Ok(decode_bpe(&vocab.decode(h.content())))
}
