//! Low-rank adapters on frozen attention projections.
//!
//! A target projection `W` (d_in × d_out) gains `A` (d_in × r) and `B`
//! (r × d_out); the effective weight is `W + (α/r)·A·B`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Graph, ParamSet, Scalar, ScheduleKind, Tensor};
use crate::bpe::{BpeModel, Vocabulary};
use crate::corpus::SplitCorpus;
use crate::seed;
use crate::transformer::{
    fit, make_example, Binder, Ctx, Example, FitOptions, HistoryRecord, Net, TransformerError, TransformerModel,
    ValidationSet,
};

pub const INIT_STD: f64 = 0.01;
pub const DEFAULT_TARGETS: [&str; 2] = ["q", "v"];

#[derive(Debug, thiserror::Error)]
pub enum LoraError {
    #[error("invalid LoRA configuration: {0}")]
    Config(String),
    #[error("adapters were already merged into the base model")]
    Consumed,
    #[error("base model mismatch: adapters were trained on {expected}, got {actual}")]
    BaseMismatch { expected: String, actual: String },
    #[error("base parameters changed during adapter training")]
    BaseMutated,
    #[error(transparent)]
    Model(#[from] TransformerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// Attention projections to adapt (subset of q, k, v, o).
    pub targets: Vec<String>,
    pub seed: u64,
}

impl LoraSpec {
    /// Rank `r` with `α = 2r` on the query and value projections.
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            targets: DEFAULT_TARGETS.iter().map(|s| s.to_string()).collect(),
            seed,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Names of the weight matrices `spec` adapts in `model`.
pub fn target_weights<F: Scalar>(model: &TransformerModel<F>, spec: &LoraSpec) -> Vec<String> {
    model
        .params
        .names()
        .filter(|n| {
            let parts: Vec<&str> = n.split('.').collect();
            parts.len() == 5
                && matches!(parts[2], "self" | "cross")
                && parts[4] == "w"
                && spec.targets.iter().any(|t| t == parts[3])
        })
        .cloned()
        .collect()
}

#[derive(Clone, Debug)]
pub struct AdaptedModel<F> {
    pub base: TransformerModel<F>,
    pub adapters: ParamSet<F>,
    pub spec: LoraSpec,
    consumed: bool,
}

/// Adds adapters with `A ~ N(0, 0.01²)` and `B = 0`, so the adapted model
/// starts out computing exactly what the base computes.
pub fn inject<F: Scalar>(model: TransformerModel<F>, spec: LoraSpec) -> Result<AdaptedModel<F>, LoraError> {
    if spec.rank == 0 {
        return Err(LoraError::Config("rank must be positive".into()));
    }
    if !(spec.alpha.is_finite() && spec.alpha > 0.0) {
        return Err(LoraError::Config(format!("alpha {} must be positive", spec.alpha)));
    }
    if let Some(t) = spec.targets.iter().find(|t| !["q", "k", "v", "o"].contains(&t.as_str())) {
        return Err(LoraError::Config(format!("unknown target projection `{t}`")));
    }
    let targets = target_weights(&model, &spec);
    if targets.is_empty() {
        return Err(LoraError::Config("model has no attention projections to adapt".into()));
    }
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut adapters = ParamSet::new();
    for name in targets {
        let shape = model.params.get(&name).expect("listed").shape().to_vec();
        let (d_in, d_out) = (shape[0], shape[1]);
        if spec.rank >= d_in.min(d_out) {
            return Err(LoraError::Config(format!(
                "rank {} must be below min(d_in, d_out) = {} for {name}",
                spec.rank,
                d_in.min(d_out)
            )));
        }
        let prefix = name.strip_suffix(".w").expect("weight name");
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &format!("lora/{prefix}"), 0));
        let a = (0..d_in * spec.rank).map(|_| F::of(normal.sample(&mut rng))).collect();
        adapters.insert(format!("{prefix}.lora_a"), Tensor::new(&[d_in, spec.rank], a).expect("shape"));
        adapters.insert(format!("{prefix}.lora_b"), Tensor::zeros(&[spec.rank, d_out]));
    }
    Ok(AdaptedModel {
        base: model,
        adapters,
        spec,
        consumed: false,
    })
}

impl<F: Scalar> AdaptedModel<F> {
    pub fn num_trainable(&self) -> usize {
        self.adapters.num_scalars()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Base and adapter parameters in one set.
    pub fn combined(&self) -> TransformerModel<F> {
        let mut m = self.base.clone();
        for (k, v) in self.adapters.iter() {
            m.params.insert(k.clone(), v.clone());
        }
        m
    }

    pub fn forward(&self, src: &[Vec<usize>], tgt_in: &[Vec<usize>]) -> Result<Tensor<F>, LoraError> {
        self.ensure_live()?;
        let mut g = Graph::inference();
        let mut b = Binder::new()
            .source(&self.base.params, false)
            .source(&self.adapters, false)
            .lora_scale(self.spec.scale());
        let logits = Net::new(&self.base.config).forward(&mut g, &mut b, &mut Ctx::eval(), src, tgt_in)?;
        Ok(g.value(logits).clone())
    }

    fn ensure_live(&self) -> Result<(), LoraError> {
        if self.consumed {
            Err(LoraError::Consumed)
        } else {
            Ok(())
        }
    }

    /// Folds the adapters into the base weights. The adapters are consumed;
    /// merging again is an error.
    pub fn merge(&mut self) -> Result<TransformerModel<F>, LoraError> {
        self.ensure_live()?;
        let scale = self.spec.scale();
        let mut merged = self.base.clone();
        let names: Vec<String> = self
            .adapters
            .names()
            .filter_map(|n| n.strip_suffix(".lora_a").map(str::to_string))
            .collect();
        for prefix in names {
            let a = self.adapters.get(&format!("{prefix}.lora_a")).expect("a");
            let b = self.adapters.get(&format!("{prefix}.lora_b")).expect("b");
            let (d_in, r, d_out) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let w = merged.params.get_mut(&format!("{prefix}.w")).expect("target weight");
            let (ad, bd) = (a.data(), b.data());
            for i in 0..d_in {
                for j in 0..d_out {
                    let mut s = 0.0;
                    for k in 0..r {
                        s += ad[i * r + k].as_f64() * bd[k * d_out + j].as_f64();
                    }
                    if s != 0.0 {
                        let cell = &mut w.data_mut()[i * d_out + j];
                        *cell = F::of(cell.as_f64() + scale * s);
                    }
                }
            }
        }
        self.adapters = ParamSet::new();
        self.consumed = true;
        Ok(merged)
    }

    /// Adapter checkpoint tied to the base parameters' hash.
    pub fn to_checkpoint(&self) -> Result<Checkpoint, LoraError> {
        self.ensure_live()?;
        let meta = serde_json::json!({
            "lora": self.spec,
            "base_hash": self.base.params.content_hash(),
            "base_model": self.base.spec(),
        });
        Ok(Checkpoint::new(meta, String::new(), 0, &self.adapters, None))
    }

    /// Re-attaches saved adapters to `base`, verifying the base hash.
    pub fn from_checkpoint(base: TransformerModel<F>, ckpt: &Checkpoint) -> Result<Self, LoraError> {
        let meta = &ckpt.meta.model_config;
        let expected = meta["base_hash"].as_str().unwrap_or_default().to_string();
        let actual = base.params.content_hash();
        if expected != actual {
            return Err(LoraError::BaseMismatch { expected, actual });
        }
        let spec: LoraSpec = serde_json::from_value(meta["lora"].clone())
            .map_err(|e| LoraError::Config(format!("bad adapter manifest: {e}")))?;
        let adapters: ParamSet<F> = ckpt.params();
        Ok(Self {
            base,
            adapters,
            spec,
            consumed: false,
        })
    }
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Linear
}
fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraTrainConfig {
    pub rank: usize,
    /// Defaults to twice the rank.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub token_batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_one")]
    pub validate_every: usize,
    #[serde(default)]
    pub patience: Option<usize>,
}

impl LoraTrainConfig {
    pub fn spec(&self, seed: u64) -> LoraSpec {
        let s = LoraSpec::new(self.rank, seed::derive(seed, "lora-init", 0));
        match self.alpha {
            Some(a) => s.with_alpha(a),
            None => s,
        }
    }

    pub fn validate(&self) -> Result<(), LoraError> {
        if !matches!(self.schedule, ScheduleKind::Linear | ScheduleKind::Constant) {
            return Err(LoraError::Config(format!(
                "adapter training supports linear or constant schedules, not {:?}",
                self.schedule
            )));
        }
        if self.epochs == 0 || self.rank == 0 || self.token_batch_size == 0 || self.validate_every == 0 {
            return Err(LoraError::Config("epochs, rank, token_batch_size and validate_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LoraError::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

pub struct LoraOutcome {
    pub history: Vec<HistoryRecord>,
    pub base_hash: String,
}

/// Trains only the adapter matrices; the base must come out byte-identical.
pub fn train_adapters<F: Scalar>(
    adapted: &mut AdaptedModel<F>,
    split: &SplitCorpus,
    bpe: &BpeModel,
    vocab: &Vocabulary,
    cfg: &LoraTrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&HistoryRecord),
) -> Result<LoraOutcome, LoraError> {
    cfg.validate()?;
    adapted.ensure_live()?;
    let config = adapted.base.config.clone();
    let max_len = config.max_len;
    let examples: Vec<Example> = split.train.pairs.iter().map(|p| make_example(bpe, vocab, p, max_len)).collect();
    let valid = ValidationSet::new(bpe, vocab, &split.valid.pairs, max_len);
    let before = adapted.base.params.content_hash();
    let scale = adapted.spec.scale();
    let opts = FitOptions {
        epochs: cfg.epochs,
        token_batch_size: cfg.token_batch_size,
        patience: cfg.patience,
        validate_every: cfg.validate_every,
        optimizer: crate::autodiff::OptimizerConfig::adamw(),
        seed,
    };
    let base = &adapted.base;
    let result = fit(
        &config,
        Some(&base.params),
        &mut adapted.adapters,
        scale,
        &examples,
        &opts,
        |total| match cfg.schedule {
            ScheduleKind::Constant => crate::autodiff::LrSchedule::Constant { base_lr: cfg.lr },
            _ => crate::autodiff::LrSchedule::Linear {
                base_lr: cfg.lr,
                min_lr: cfg.lr_min,
                total_steps: total,
            },
        },
        |adapters| {
            if valid.src.is_empty() {
                return Ok((0.0, 0.0));
            }
            let mut m = base.clone();
            for (k, v) in adapters.iter() {
                m.params.insert(k.clone(), v.clone());
            }
            valid.score(&m, scale)
        },
        on_epoch,
    )?;
    if adapted.base.params.content_hash() != before {
        return Err(LoraError::BaseMutated);
    }
    adapted.adapters = result.best;
    Ok(LoraOutcome {
        history: result.history,
        base_hash: before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{build_model, TransformerConfig};

    #[test]
    fn alpha_is_twice_rank() {
        assert_eq!(LoraSpec::new(16, 0).alpha, 32.0);
        assert_eq!(LoraSpec::new(8, 0).scale(), 2.0);
    }

    #[test]
    fn rank_too_large() {
        let m = build_model::<f32>(&TransformerConfig::t1_quarter(20), 1).unwrap();
        assert!(matches!(inject(m, LoraSpec::new(32, 0)), Err(LoraError::Config(_))));
    }

    #[test]
    fn double_merge_rejected() {
        let m = build_model::<f32>(&TransformerConfig::t1_quarter(20), 1).unwrap();
        let mut a = inject(m.clone(), LoraSpec::new(4, 0)).unwrap();
        assert_eq!(a.merge().unwrap(), m);
        assert!(matches!(a.merge(), Err(LoraError::Consumed)));
    }

    #[test]
    fn schedule_kind_restricted() {
        let cfg = LoraTrainConfig {
            rank: 8,
            alpha: None,
            epochs: 3,
            lr: 1e-3,
            token_batch_size: 256,
            schedule: ScheduleKind::Cyclic,
            lr_min: 0.0,
            validate_every: 1,
            patience: None,
        };
        assert!(cfg.validate().is_err());
    }
}
