use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DistillError;
use crate::autodiff::{Graph, LrSchedule, OptimizerConfig, OptimizerState, ParamSet, Scalar, ScheduleKind, Tensor};
use crate::bpe::{decode_bpe, BpeModel, Vocabulary, PAD_ID};
use crate::corpus::{normalize_text, ParallelCorpus};
use crate::eval;
use crate::seed;
use crate::transformer::{
    greedy_from_memory, make_example, token_batches, Binder, Ctx, Example, Net, TransformerConfig, TransformerError,
    TransformerModel,
};

/// Affine map from student states to decoder memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Bridge<F> {
    pub params: ParamSet<F>,
}

impl<F: Scalar> Bridge<F> {
    /// Xavier-uniform weight, zero bias.
    pub fn new(d_in: usize, d_out: usize, seed: u64) -> Self {
        let a = (6.0 / (d_in + d_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "init/bridge.w", 0));
        let w = (0..d_in * d_out).map(|_| F::of(rng.random_range(-a..a))).collect();
        let mut params = ParamSet::new();
        params.insert("bridge.w", Tensor::new(&[d_in, d_out], w).expect("shape"));
        params.insert("bridge.b", Tensor::zeros(&[d_out]));
        Self { params }
    }

    pub fn d_in(&self) -> usize {
        self.params.get("bridge.w").expect("weight").shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.params.get("bridge.w").expect("weight").shape()[1]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let w = self.params.get("bridge.w").expect("weight").data();
        let b = self.params.get("bridge.b").expect("bias").data();
        let d_out = self.d_out();
        (0..d_out)
            .map(|j| b[j].as_f64() + x.iter().enumerate().map(|(i, v)| v * w[i * d_out + j].as_f64()).sum::<f64>())
            .collect()
    }
}

fn default_batch() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub token_batch_size: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_d_model: usize,
    pub decoder_d_ff: usize,
    #[serde(default)]
    pub dropout: f64,
    /// `constant` or `linear` decay to `lr_min` over the run.
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub lr_min: f64,
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Constant
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !matches!(self.schedule, ScheduleKind::Constant | ScheduleKind::Linear) {
            return Err(DistillError::Config(format!(
                "bridge training supports linear or constant schedules, not {:?}",
                self.schedule
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(DistillError::Config("need 0 <= lr_min <= lr and a finite positive lr".into()));
        }
        Ok(())
    }

    /// Decoder shape for a vocabulary shared with `base`.
    pub fn decoder_config(&self, base: &TransformerConfig) -> Result<TransformerConfig, TransformerError> {
        let c = TransformerConfig {
            num_layers: self.decoder_layers,
            num_heads: self.decoder_heads,
            d_model: self.decoder_d_model,
            d_ff: self.decoder_d_ff,
            dropout: self.dropout,
            ..base.clone()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub bleu: f64,
}

pub struct BridgeOutcome<F> {
    pub bridge: Bridge<F>,
    pub decoder: TransformerModel<F>,
    pub history: Vec<BridgeRecord>,
    pub student_hash: String,
}

/// Student states `[B, S, D_s]` and key mask for a batch of sources.
fn student_memory<F: Scalar>(student: &TransformerModel<F>, src: &[Vec<usize>]) -> Result<(Tensor<F>, Tensor<F>), TransformerError> {
    let mut g = Graph::inference();
    let mut b = Binder::new().source(&student.params, false);
    let (m, k) = Net::new(&student.config).encode(&mut g, &mut b, &mut Ctx::eval(), src)?;
    Ok((g.value(m).clone(), g.value(k).clone()))
}

struct Stage<'a, F> {
    student: &'a TransformerModel<F>,
    decoder_config: &'a TransformerConfig,
}

impl<F: Scalar> Stage<'_, F> {
    /// Cross entropy of one batch; gradients land in the binder's
    /// trainable sources when `g` records them.
    fn loss(&self, g: &mut Graph<F>, b: &mut Binder<F>, ctx: &mut Ctx, batch: &[&Example]) -> Result<crate::autodiff::Var, DistillError> {
        let src: Vec<Vec<usize>> = batch.iter().map(|e| e.src.clone()).collect();
        let tin: Vec<Vec<usize>> = batch.iter().map(|e| e.tgt_in.clone()).collect();
        let t = tin.iter().map(Vec::len).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(batch.len() * t);
        for e in batch {
            targets.extend(&e.tgt_out);
            targets.extend(std::iter::repeat_n(PAD_ID, t - e.tgt_out.len()));
        }
        let (mem, mask) = student_memory(self.student, &src)?;
        let mem = g.constant(mem);
        let mask = g.constant(mask);
        let mem = b.linear(g, mem, "bridge")?;
        let logits = Net::new(self.decoder_config).decode(g, b, ctx, mem, mask, &tin)?;
        Ok(g.cross_entropy(logits, &targets, PAD_ID, self.decoder_config.label_smoothing)?)
    }
}

/// Trains the bridge and decoder to translate from frozen student states.
#[allow(clippy::too_many_arguments)]
pub fn train_bridge_decoder<F: Scalar>(
    student: &TransformerModel<F>,
    mut bridge: Bridge<F>,
    mut decoder: TransformerModel<F>,
    train: &ParallelCorpus,
    eval_set: &ParallelCorpus,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    cfg: &BridgeConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&BridgeRecord),
) -> Result<BridgeOutcome<F>, DistillError> {
    cfg.validate()?;
    if bridge.d_in() != student.config.d_model {
        return Err(DistillError::Config(format!(
            "bridge input {} does not match student dimension {}",
            bridge.d_in(),
            student.config.d_model
        )));
    }
    if bridge.d_out() != decoder.config.d_model {
        return Err(DistillError::Config(format!(
            "bridge output {} does not match decoder d_model {}",
            bridge.d_out(),
            decoder.config.d_model
        )));
    }
    if train.is_empty() || eval_set.is_empty() {
        return Err(DistillError::Config("bridge training needs non-empty train and eval corpora".into()));
    }
    let student_hash = student.params.content_hash();
    let max_len = decoder.config.max_len.min(student.config.max_len);
    let examples: Vec<Example> = train.pairs.iter().map(|p| make_example(bpe, vocab, p, max_len)).collect();
    let eval_examples: Vec<Example> = eval_set.pairs.iter().map(|p| make_example(bpe, vocab, p, max_len)).collect();
    let refs: Vec<String> = eval_set.pairs.iter().map(|p| normalize_text(&p.tgt)).collect();
    let dcfg = decoder.config.clone();
    let stage = Stage {
        student,
        decoder_config: &dcfg,
    };
    let limit = cfg.token_batch_size.max(2 * max_len);
    // Decoder and bridge names are disjoint, so both train as one set.
    let mut params = std::mem::take(&mut decoder.params);
    for (k, v) in bridge.params.iter() {
        params.insert(k.clone(), v.clone());
    }
    let mut opt = OptimizerState::new(OptimizerConfig::adamw());
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let per_epoch = token_batches(&examples, &order, limit).len() as u64;
    let schedule = match cfg.schedule {
        ScheduleKind::Linear => LrSchedule::Linear {
            base_lr: cfg.lr,
            min_lr: cfg.lr_min,
            total_steps: per_epoch * cfg.epochs as u64,
        },
        _ => LrSchedule::Constant { base_lr: cfg.lr },
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, "bridge-shuffle", epoch as u64)));
        let (mut loss_sum, mut tok) = (0.0, 0usize);
        for batch in token_batches(&examples, &order, limit) {
            let exs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let n: usize = exs.iter().map(|e| e.tgt_out.len()).sum();
            let (loss, grads) = {
                let mut g = Graph::new();
                let mut b = Binder::new().source(&params, true);
                let mut ctx = Ctx::train(seed, step, true);
                let l = stage.loss(&mut g, &mut b, &mut ctx, &exs)?;
                let v = g.value(l).item().as_f64();
                g.backward(l)?;
                (v, b.grads(&g))
            };
            if !loss.is_finite() {
                return Err(TransformerError::NonFinite(format!("decoder loss {loss} at epoch {epoch}")).into());
            }
            opt.step(&mut params, &grads, schedule.lr_at(step, &[]))?;
            step += 1;
            loss_sum += loss * n as f64;
            tok += n;
        }
        let (eval_loss, bleu) = evaluate_stage(&stage, &params, &eval_examples, &refs, vocab)?;
        let rec = BridgeRecord {
            epoch,
            train_loss: loss_sum / tok.max(1) as f64,
            eval_loss,
            bleu,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    if student.params.content_hash() != student_hash {
        return Err(DistillError::FrozenMutated("student"));
    }
    for name in ["bridge.w", "bridge.b"] {
        let t = params.remove(name).expect("bridge parameter");
        bridge.params.insert(name, t);
    }
    decoder.params = params;
    Ok(BridgeOutcome {
        bridge,
        decoder,
        history,
        student_hash,
    })
}

fn evaluate_stage<F: Scalar>(
    stage: &Stage<F>,
    params: &ParamSet<F>,
    examples: &[Example],
    refs: &[String],
    vocab: &Vocabulary,
) -> Result<(f64, f64), DistillError> {
    let decoder = TransformerModel {
        config: stage.decoder_config.clone(),
        parts: crate::transformer::Parts::DECODER,
        params: params.clone(),
    };
    let (mut loss_sum, mut tok) = (0.0, 0usize);
    let mut hyps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let exs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::inference();
        let mut b = Binder::new().source(params, false);
        let l = stage.loss(&mut g, &mut b, &mut Ctx::eval(), &exs)?;
        let n: usize = exs.iter().map(|e| e.tgt_out.len()).sum();
        loss_sum += g.value(l).item().as_f64() * n as f64;
        tok += n;

        let src: Vec<Vec<usize>> = chunk.iter().map(|e| e.src.clone()).collect();
        let (mem, mask) = student_memory(stage.student, &src)?;
        let mut g = Graph::inference();
        let mut b = Binder::new().source(params, false);
        let m = g.constant(mem);
        let m = b.linear(&mut g, m, "bridge")?;
        let longest = src.iter().map(Vec::len).max().unwrap_or(1);
        let cap = (2 * longest + 10).min(decoder.config.max_len - 1);
        for ids in greedy_from_memory(&decoder, 1.0, g.value(m), &mask, cap)? {
            hyps.push(decode_bpe(&vocab.decode(&ids)));
        }
    }
    let bleu = eval::bleu(&hyps, refs).map_err(TransformerError::from)?.bleu_percent;
    Ok((loss_sum / tok.max(1) as f64, bleu))
}
