use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use lowres_mt::autodiff::Checkpoint;
use lowres_mt::bpe::{build_vocab, learn_bpe, BpeModel, Vocabulary, DEFAULT_NUM_MERGES};
use lowres_mt::corpus::{
    self, gen_synthetic, preprocess_raw, read_aligned, read_tsv, write_tsv, ParallelCorpus,
    PreprocessRules, SentencePair, SplitCorpus,
};
use lowres_mt::distill::{
    cross_lingual_cosine, embed_all, pretrain_teacher, read_embeddings, train_bridge_decoder, train_distill,
    write_embeddings, Bridge, BridgeConfig, DistillConfig,
};
use lowres_mt::eval::{self, cosine_hist, histogram_csv, pca2, projections_csv};
use lowres_mt::lora::{inject, train_adapters, LoraTrainConfig};
use lowres_mt::transformer::{
    build_model, build_parts, encode_source, load_model, train, translate, Architecture, DecodeConfig, Parts,
    TrainConfig, TransformerConfig, TransformerModel, DEFAULT_MAX_LEN,
};

use crate::config::{self, OutDir, RESOLVED_CONFIG, SUMMARY};
use crate::error::{CliError, Result};

/// Flags every command accepts.
#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory (created if needed).
    #[arg(long)]
    pub out: PathBuf,
    /// Override a configuration key, e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Common {
    fn load<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        config::load(self.config.as_deref(), &self.sets)
    }

    /// Like `load`, layered over the serialized `defaults`.
    fn load_or<T: Serialize + for<'de> Deserialize<'de>>(&self, defaults: &T) -> Result<T> {
        let mut base = serde_json::to_value(defaults).expect("serializable");
        merge(&mut base, config::load_value(self.config.as_deref(), &self.sets)?);
        config::parse(base)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Writes the resolved configuration that produced the outputs in `out`.
fn record<T: Serialize>(out: &OutDir, command: &str, common: &Common, cfg: &T, inputs: Value) -> Result<()> {
    out.write_json(
        RESOLVED_CONFIG,
        &json!({
            "command": command,
            "seed": common.seed,
            "config": cfg,
            "inputs": inputs,
        }),
    )?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn read_corpus(path: &Path) -> Result<ParallelCorpus> {
    config::require(path)?;
    let raw = read_tsv(path)?;
    let mut pairs = Vec::with_capacity(raw.len());
    for (i, (s, t)) in raw.into_iter().enumerate() {
        let bad = || CliError::Failed(format!("{}:{}: invalid UTF-8", path.display(), i + 1));
        let s = String::from_utf8(s).map_err(|_| bad())?;
        let t = String::from_utf8(t).map_err(|_| bad())?;
        pairs.push(SentencePair::new(s, t));
    }
    Ok(ParallelCorpus::new("src", "tgt", pairs))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    config::require(path)?;
    Ok(config::read_text(path)?.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

fn load_bpe(path: &Path) -> Result<BpeModel> {
    config::require(path)?;
    Ok(BpeModel::from_merge_file(&config::read_text(path)?)?)
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    config::require(path)?;
    Ok(Vocabulary::from_file(&config::read_text(path)?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    config::require(path)?;
    Ok(Checkpoint::load(path)?)
}

fn save_model(out: &OutDir, name: &str, model: &TransformerModel<f32>, vocab: &Vocabulary, step: u64) -> Result<PathBuf> {
    let spec = serde_json::to_value(model.spec()).expect("spec serializes");
    let path = out.path(name);
    Checkpoint::new(spec, vocab.content_hash(), step, &model.params, None).save(&path)?;
    Ok(path)
}

// ---- synth ----------------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of sentence pairs.
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Words per language.
    #[arg(long, default_value_t = 24)]
    pub vocab_size: usize,
}

pub fn synth(a: &SynthArgs) -> Result<Value> {
    if a.n == 0 || a.vocab_size < 4 {
        return Err(CliError::Config("synth needs --n >= 1 and --vocab-size >= 4".into()));
    }
    let out = OutDir::create(&a.common.out)?;
    let c = gen_synthetic(a.n, a.common.seed, a.vocab_size);
    write_tsv(out.path("corpus.tsv"), &c)?;
    record(&out, "synth", &a.common, &json!({"n": a.n, "vocab_size": a.vocab_size}), json!({}))?;
    Ok(json!({"pairs": c.len(), "corpus": path_str(&out.path("corpus.tsv"))}))
}

// ---- preprocess -----------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tab-separated source/target pairs.
    #[arg(long, conflicts_with_all = ["src", "tgt"])]
    pub input: Option<PathBuf>,
    /// Line-aligned source file (with --tgt).
    #[arg(long, requires = "tgt")]
    pub src: Option<PathBuf>,
    #[arg(long, requires = "src")]
    pub tgt: Option<PathBuf>,
}

pub fn preprocess_cmd(a: &PreprocessArgs) -> Result<Value> {
    let rules: PreprocessRules = a.common.load_or(&PreprocessRules::default())?;
    let raw = match (&a.input, &a.src, &a.tgt) {
        (Some(p), _, _) => {
            config::require(p)?;
            read_tsv(p)?
        }
        (None, Some(s), Some(t)) => {
            config::require(s)?;
            config::require(t)?;
            read_aligned(s, t)?
        }
        _ => return Err(CliError::Config("preprocess needs --input or --src and --tgt".into())),
    };
    let out = OutDir::create(&a.common.out)?;
    let (clean, report) = preprocess_raw(&raw, "src", "tgt", &rules);
    write_tsv(out.path("clean.tsv"), &clean)?;
    let inputs = json!({"input": a.input.as_deref().map(path_str), "src": a.src.as_deref().map(path_str), "tgt": a.tgt.as_deref().map(path_str)});
    record(&out, "preprocess", &a.common, &rules, inputs)?;
    Ok(serde_json::to_value(report).expect("report serializes"))
}

// ---- split ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test fractions.
    pub ratios: (f64, f64, f64),
}

#[derive(clap::Args, Debug)]
pub struct InputArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: PathBuf,
}

pub fn split_cmd(a: &InputArgs) -> Result<Value> {
    let cfg: SplitConfig = a.common.load_or(&SplitConfig { ratios: (0.8, 0.1, 0.1) })?;
    let c = read_corpus(&a.input)?;
    let s = corpus::split(&c, cfg.ratios, a.common.seed)?;
    let out = OutDir::create(&a.common.out)?;
    write_tsv(out.path("train.tsv"), &s.train)?;
    write_tsv(out.path("valid.tsv"), &s.valid)?;
    write_tsv(out.path("test.tsv"), &s.test)?;
    record(&out, "split", &a.common, &cfg, json!({"input": path_str(&a.input)}))?;
    Ok(json!({"train": s.train.len(), "valid": s.valid.len(), "test": s.test.len()}))
}

// ---- bpe ------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpeConfig {
    pub num_merges: usize,
}

fn learn_subwords(train: &ParallelCorpus, num_merges: usize, out: &OutDir) -> Result<(BpeModel, Vocabulary)> {
    let bpe = learn_bpe(train, num_merges)?;
    let vocab = build_vocab(&bpe, train);
    out.write("merges.txt", bpe.to_merge_file())?;
    out.write("vocab.txt", vocab.to_file())?;
    Ok((bpe, vocab))
}

pub fn bpe_learn(a: &InputArgs) -> Result<Value> {
    let cfg: BpeConfig = a.common.load_or(&BpeConfig {
        num_merges: DEFAULT_NUM_MERGES,
    })?;
    let c = read_corpus(&a.input)?;
    let out = OutDir::create(&a.common.out)?;
    let (bpe, vocab) = learn_subwords(&c, cfg.num_merges, &out)?;
    record(&out, "bpe-learn", &a.common, &cfg, json!({"input": path_str(&a.input)}))?;
    Ok(json!({
        "merges": bpe.merges().len(),
        "vocab_size": vocab.len(),
        "vocab_hash": vocab.content_hash(),
    }))
}

#[derive(clap::Args, Debug)]
pub struct BpeApplyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Merge file written by bpe-learn.
    #[arg(long)]
    pub bpe: PathBuf,
    /// Plain text, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
}

pub fn bpe_apply(a: &BpeApplyArgs) -> Result<Value> {
    let bpe = load_bpe(&a.bpe)?;
    let lines = read_lines(&a.input)?;
    let out = OutDir::create(&a.common.out)?;
    let mut text = String::new();
    let mut tokens = 0;
    for l in &lines {
        let seg = bpe.apply(l);
        tokens += seg.len();
        text.push_str(&seg.join(" "));
        text.push('\n');
    }
    out.write("segmented.txt", text)?;
    record(&out, "bpe-apply", &a.common, &json!({}), json!({"bpe": path_str(&a.bpe), "input": path_str(&a.input)}))?;
    Ok(json!({"lines": lines.len(), "tokens": tokens}))
}

// ---- train ----------------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: PathBuf,
    /// Validation pairs; defaults to the training set.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Merge file; learned from the training set when absent.
    #[arg(long, requires = "vocab")]
    pub bpe: Option<PathBuf>,
    #[arg(long, requires = "bpe")]
    pub vocab: Option<PathBuf>,
    /// Merge budget when learning BPE here.
    #[arg(long, default_value_t = DEFAULT_NUM_MERGES)]
    pub num_merges: usize,
}

pub fn train_cmd(a: &TrainArgs) -> Result<Value> {
    let cfg: TrainConfig = a.common.load()?;
    cfg.validate()?;
    let train_c = read_corpus(&a.train)?;
    let valid_c = match &a.valid {
        Some(p) => read_corpus(p)?,
        None => train_c.clone(),
    };
    let out = OutDir::create(&a.common.out)?;
    let (bpe, vocab) = match (&a.bpe, &a.vocab) {
        (Some(b), Some(v)) => {
            let (bpe, vocab) = (load_bpe(b)?, load_vocab(v)?);
            out.write("merges.txt", bpe.to_merge_file())?;
            out.write("vocab.txt", vocab.to_file())?;
            (bpe, vocab)
        }
        _ => learn_subwords(&train_c, a.num_merges, &out)?,
    };
    let mc = cfg.model_config(vocab.len())?;
    let model = build_model::<f32>(&mc, a.common.seed)?;
    let num_params = model.num_params();
    let split = SplitCorpus {
        train: train_c,
        valid: valid_c,
        test: ParallelCorpus::new("src", "tgt", Vec::new()),
        seed: a.common.seed,
    };
    let outcome = train(model, &split, &bpe, &vocab, &cfg, a.common.seed, |r| {
        if let Some(b) = r.val_bleu {
            eprintln!("epoch {} loss {:.4} bleu {:.2} lr {:.2e}", r.epoch, r.loss, b, r.lr);
        }
    })?;
    outcome.checkpoint.save(out.path("model.ckpt"))?;
    out.write_jsonl("history.jsonl", &outcome.history)?;
    let inputs = json!({"train": path_str(&a.train), "valid": a.valid.as_deref().map(path_str)});
    record(&out, "train", &a.common, &cfg, inputs)?;
    let best = outcome.history.iter().filter_map(|r| r.val_bleu).fold(0.0, f64::max);
    Ok(json!({
        "num_params": num_params,
        "vocab_size": vocab.len(),
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_bleu": best,
        "stopped_early": outcome.stopped_early,
    }))
}

// ---- lora-train -----------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct LoraArgs {
    #[command(flatten)]
    pub common: Common,
    /// Base model checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: Option<PathBuf>,
}

pub fn lora_train(a: &LoraArgs) -> Result<Value> {
    let cfg: LoraTrainConfig = a.common.load()?;
    cfg.validate()?;
    let (bpe, vocab) = (load_bpe(&a.bpe)?, load_vocab(&a.vocab)?);
    let base = load_model::<f32>(&load_checkpoint(&a.base)?, &vocab)?;
    let train_c = read_corpus(&a.train)?;
    let valid_c = match &a.valid {
        Some(p) => read_corpus(p)?,
        None => ParallelCorpus::new("src", "tgt", Vec::new()),
    };
    let split = SplitCorpus {
        train: train_c,
        valid: valid_c,
        test: ParallelCorpus::new("src", "tgt", Vec::new()),
        seed: a.common.seed,
    };
    let out = OutDir::create(&a.common.out)?;
    let mut adapted = inject(base, cfg.spec(a.common.seed))?;
    let num_trainable = adapted.num_trainable();
    let outcome = train_adapters(&mut adapted, &split, &bpe, &vocab, &cfg, a.common.seed, |r| {
        if let Some(b) = r.val_bleu {
            eprintln!("epoch {} loss {:.4} bleu {:.2}", r.epoch, r.loss, b);
        }
    })?;
    adapted.to_checkpoint()?.save(out.path("adapters.ckpt"))?;
    let merged = adapted.merge()?;
    save_model(&out, "merged.ckpt", &merged, &vocab, 0)?;
    out.write_jsonl("history.jsonl", &outcome.history)?;
    let inputs = json!({"base": path_str(&a.base), "train": path_str(&a.train), "valid": a.valid.as_deref().map(path_str)});
    record(&out, "lora-train", &a.common, &cfg, inputs)?;
    Ok(json!({
        "num_trainable": num_trainable,
        "base_hash": outcome.base_hash,
        "epochs_run": outcome.history.len(),
    }))
}

// ---- distill --------------------------------------------------------------

/// Encoder shape shared by teacher and student.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub model_architecture: String,
    pub embedding_dimension: usize,
    #[serde(default)]
    pub num_layers: Option<usize>,
    #[serde(default)]
    pub num_heads: Option<usize>,
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl EncoderShape {
    fn config(&self, vocab_size: usize) -> Result<TransformerConfig> {
        let arch: Architecture = self.model_architecture.parse()?;
        let (layers, heads, _, _) = arch.dims();
        let c = TransformerConfig {
            num_layers: self.num_layers.unwrap_or(layers),
            num_heads: self.num_heads.unwrap_or(heads),
            d_model: self.embedding_dimension,
            d_ff: self.d_ff.unwrap_or(4 * self.embedding_dimension),
            dropout: self.dropout,
            max_len: self.max_len,
            ..TransformerConfig::preset(arch, vocab_size)
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillRunConfig {
    pub model: EncoderShape,
    pub distill: DistillConfig,
}

#[derive(clap::Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    /// Bilingual pairs; the teacher pretrains on the source side.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

pub fn distill_cmd(a: &DistillArgs) -> Result<Value> {
    let cfg: DistillRunConfig = a.common.load()?;
    cfg.distill.validate()?;
    let (bpe, vocab) = (load_bpe(&a.bpe)?, load_vocab(&a.vocab)?);
    let c = read_corpus(&a.input)?;
    let mc = cfg.model.config(vocab.len())?;
    let out = OutDir::create(&a.common.out)?;
    let sources: Vec<String> = c.pairs.iter().map(|p| p.src.clone()).collect();
    let teacher = pretrain_teacher::<f32>(&mc, &bpe, &vocab, &sources, &cfg.distill, a.common.seed)?;
    let outcome = train_distill(&teacher, teacher.clone(), &bpe, &vocab, &c, &cfg.distill, a.common.seed, |r| {
        eprintln!("epoch {} loss {:.5} cosine {:.4}", r.epoch, r.loss, r.mean_cosine);
    })?;
    save_model(&out, "teacher.ckpt", &teacher, &vocab, 0)?;
    save_model(&out, "student.ckpt", &outcome.student, &vocab, 0)?;
    out.write_jsonl("history.jsonl", &outcome.history)?;
    record(&out, "distill", &a.common, &cfg, json!({"input": path_str(&a.input)}))?;
    let first = outcome.history.first().map(|r| r.mean_cosine).unwrap_or(0.0);
    let last = outcome.history.last().map(|r| r.mean_cosine).unwrap_or(0.0);
    Ok(json!({
        "initial_mean_cosine": first,
        "final_mean_cosine": last,
        "teacher_hash": outcome.teacher_hash,
    }))
}

// ---- bridge-train ---------------------------------------------------------

#[derive(clap::Args, Debug)]
pub struct BridgeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Distilled student checkpoint (kept frozen).
    #[arg(long)]
    pub student: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub bpe: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

pub fn bridge_train(a: &BridgeArgs) -> Result<Value> {
    let cfg: BridgeConfig = a.common.load()?;
    cfg.validate()?;
    let (bpe, vocab) = (load_bpe(&a.bpe)?, load_vocab(&a.vocab)?);
    let student = load_model::<f32>(&load_checkpoint(&a.student)?, &vocab)?;
    let (train_c, eval_c) = (read_corpus(&a.train)?, read_corpus(&a.eval)?);
    let dc = cfg.decoder_config(&student.config)?;
    let decoder = build_parts::<f32>(&dc, Parts::DECODER, lowres_mt::seed::derive(a.common.seed, "decoder", 0))?;
    let bridge = Bridge::new(student.config.d_model, dc.d_model, a.common.seed);
    let out = OutDir::create(&a.common.out)?;
    let outcome = train_bridge_decoder(&student, bridge, decoder, &train_c, &eval_c, &bpe, &vocab, &cfg, a.common.seed, |r| {
        eprintln!("epoch {} train {:.4} eval {:.4} bleu {:.2}", r.epoch, r.train_loss, r.eval_loss, r.bleu);
    })?;
    save_model(&out, "decoder.ckpt", &outcome.decoder, &vocab, 0)?;
    let meta = json!({
        "d_in": outcome.bridge.d_in(),
        "d_out": outcome.bridge.d_out(),
        "student_hash": outcome.student_hash,
    });
    Checkpoint::new(meta, vocab.content_hash(), 0, &outcome.bridge.params, None).save(out.path("bridge.ckpt"))?;
    out.write_jsonl("history.jsonl", &outcome.history)?;
    let inputs = json!({"student": path_str(&a.student), "train": path_str(&a.train), "eval": path_str(&a.eval)});
    record(&out, "bridge-train", &a.common, &cfg, inputs)?;
    let last = outcome.history.last();
    Ok(json!({
        "final_train_loss": last.map(|r| r.train_loss),
        "final_eval_loss": last.map(|r| r.eval_loss),
        "final_bleu": last.map(|r| r.bleu),
        "student_hash": outcome.student_hash,
    }))
}

// ---- translate / evaluate -------------------------------------------------

#[derive(clap::Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// LoRA adapters to merge into the model before decoding.
    #[arg(long, requires = "model")]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

struct Translator {
    model: TransformerModel<f32>,
    bpe: BpeModel,
    vocab: Vocabulary,
}

impl ModelArgs {
    fn open(&self) -> Result<Translator> {
        let need = |p: &Option<PathBuf>, flag: &str| {
            p.clone().ok_or_else(|| CliError::Config(format!("--{flag} is required with --model")))
        };
        let (model_p, bpe_p, vocab_p) = (need(&self.model, "model")?, need(&self.bpe, "bpe")?, need(&self.vocab, "vocab")?);
        let (bpe, vocab) = (load_bpe(&bpe_p)?, load_vocab(&vocab_p)?);
        let mut model = load_model::<f32>(&load_checkpoint(&model_p)?, &vocab)?;
        if let Some(ap) = &self.adapters {
            let mut adapted = lowres_mt::lora::AdaptedModel::from_checkpoint(model, &load_checkpoint(ap)?)?;
            model = adapted.merge()?;
        }
        Ok(Translator { model, bpe, vocab })
    }
}

impl Translator {
    fn run(&self, sources: &[String], dc: &DecodeConfig) -> Result<Vec<String>> {
        let dc = DecodeConfig {
            max_len: dc.max_len.min(self.model.config.max_len - 1),
            ..*dc
        };
        sources
            .iter()
            .map(|s| Ok(translate(&self.model, &self.bpe, &self.vocab, s, &dc)?))
            .collect()
    }
}

fn write_lines(out: &OutDir, name: &str, lines: &[String]) -> Result<PathBuf> {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    out.write(name, s)
}

#[derive(clap::Args, Debug)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Source sentences, one per line.
    #[arg(long)]
    pub input: PathBuf,
}

pub fn translate_cmd(a: &TranslateArgs) -> Result<Value> {
    let dc: DecodeConfig = a.common.load_or(&DecodeConfig::default())?;
    let sources = read_lines(&a.input)?;
    let t = a.model.open()?;
    let out = OutDir::create(&a.common.out)?;
    let hyps = t.run(&sources, &dc)?;
    write_lines(&out, "hyps.txt", &hyps)?;
    record(&out, "translate", &a.common, &dc, json!({"model": a.model.model.as_deref().map(path_str), "input": path_str(&a.input)}))?;
    Ok(json!({"sentences": hyps.len()}))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub per_sentence: bool,
    pub decode: DecodeConfig,
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Hypotheses, one per line (with --ref).
    #[arg(long, requires = "reference", conflicts_with = "data")]
    pub hyp: Option<PathBuf>,
    #[arg(long = "ref", id = "reference")]
    pub reference: Option<PathBuf>,
    /// Pairs to translate with --model and score against their targets.
    #[arg(long, requires = "model")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<Value> {
    let cfg: EvaluateConfig = a.common.load_or(&EvaluateConfig {
        per_sentence: false,
        decode: DecodeConfig::default(),
    })?;
    let (hyps, refs) = match (&a.hyp, &a.reference, &a.data) {
        (Some(h), Some(r), _) => (read_lines(h)?, read_lines(r)?),
        (None, _, Some(d)) => {
            let c = read_corpus(d)?;
            let t = a.model.open()?;
            let sources: Vec<String> = c.pairs.iter().map(|p| p.src.clone()).collect();
            let refs: Vec<String> = c.pairs.iter().map(|p| corpus::normalize_text(&p.tgt)).collect();
            (t.run(&sources, &cfg.decode)?, refs)
        }
        _ => return Err(CliError::Config("evaluate needs --hyp and --ref, or --data with --model".into())),
    };
    let out = OutDir::create(&a.common.out)?;
    if a.data.is_some() {
        write_lines(&out, "hyps.txt", &hyps)?;
    }
    let report = eval::evaluate(&hyps, &refs, cfg.per_sentence)?;
    out.write_json("report.json", &report)?;
    let inputs = json!({
        "hyp": a.hyp.as_deref().map(path_str),
        "ref": a.reference.as_deref().map(path_str),
        "data": a.data.as_deref().map(path_str),
        "model": a.model.model.as_deref().map(path_str),
    });
    record(&out, "evaluate", &a.common, &cfg, inputs)?;
    Ok(json!({
        "bleu": report.bleu_percent,
        "chrf": report.chrf_score,
        "n_sentences": report.n_sentences,
    }))
}

// ---- analyze --------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub bins: usize,
}

#[derive(clap::Args, Debug)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Encoder checkpoint used to embed both sides of --input.
    #[arg(long, requires_all = ["input", "bpe", "vocab"])]
    pub student: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub bpe: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Precomputed embedding dumps (with --tgt-emb).
    #[arg(long, requires = "tgt_emb", conflicts_with = "student")]
    pub src_emb: Option<PathBuf>,
    #[arg(long, requires = "src_emb")]
    pub tgt_emb: Option<PathBuf>,
}

pub fn analyze_cmd(a: &AnalyzeArgs) -> Result<Value> {
    let cfg: AnalyzeConfig = a.common.load_or(&AnalyzeConfig { bins: 50 })?;
    if cfg.bins == 0 {
        return Err(CliError::Config("bins must be positive".into()));
    }
    let out = OutDir::create(&a.common.out)?;
    let (src, tgt) = match (&a.student, &a.src_emb, &a.tgt_emb) {
        (Some(sp), _, _) => {
            let (bpe, vocab) = (load_bpe(a.bpe.as_deref().unwrap())?, load_vocab(a.vocab.as_deref().unwrap())?);
            let student = load_model::<f32>(&load_checkpoint(sp)?, &vocab)?;
            let c = read_corpus(a.input.as_deref().unwrap())?;
            let ml = student.config.max_len;
            let enc = |f: fn(&SentencePair) -> &str| -> Result<Vec<Vec<f64>>> {
                let seqs: Vec<Vec<usize>> = c.pairs.iter().map(|p| encode_source(&bpe, &vocab, f(p), ml)).collect();
                Ok(embed_all(&student, &seqs)?)
            };
            let (s, t) = (enc(|p| &p.src)?, enc(|p| &p.tgt)?);
            write_embeddings(out.path("src_emb.bin"), &s, "src")?;
            write_embeddings(out.path("tgt_emb.bin"), &t, "tgt")?;
            let cos = cross_lingual_cosine(&student, &bpe, &vocab, &c)?;
            out.write_json("cosines.json", &cos)?;
            (s, t)
        }
        (None, Some(s), Some(t)) => {
            config::require(s)?;
            config::require(t)?;
            (read_embeddings(s)?.1, read_embeddings(t)?.1)
        }
        _ => return Err(CliError::Config("analyze needs --student with --input, or --src-emb and --tgt-emb".into())),
    };
    let hist = cosine_hist(&src, &tgt, cfg.bins)?;
    out.write("histogram.csv", histogram_csv(&hist))?;
    let mut rows = src.clone();
    rows.extend(tgt.iter().cloned());
    let labels: Vec<String> = std::iter::repeat_n("src".to_string(), src.len())
        .chain(std::iter::repeat_n("tgt".to_string(), tgt.len()))
        .collect();
    let pca = pca2(&rows)?;
    out.write("pca.csv", projections_csv(&pca, &labels))?;
    let inputs = json!({
        "student": a.student.as_deref().map(path_str),
        "input": a.input.as_deref().map(path_str),
        "src_emb": a.src_emb.as_deref().map(path_str),
        "tgt_emb": a.tgt_emb.as_deref().map(path_str),
    });
    record(&out, "analyze", &a.common, &cfg, inputs)?;
    Ok(json!({
        "pairs": src.len(),
        "cosine_mean": hist.mean,
        "cosine_median": hist.median,
        "flagged": hist.flagged,
        "explained_variance_ratio": pca.explained_variance_ratio,
        "second_component_degenerate": pca.second_degenerate,
    }))
}

/// Writes the summary next to the command's other outputs.
pub fn write_summary(out: &Path, summary: &Value) -> Result<()> {
    OutDir::create(out)?.write_json(SUMMARY, summary)?;
    Ok(())
}
