//! Desk-scale training runs shared by the integration tests and the
//! acceptance report.

use std::time::{Duration, Instant};

use lowres_mt::autodiff::ScheduleKind;
use lowres_mt::bpe::{build_vocab, learn_bpe, BpeModel, Vocabulary};
use lowres_mt::corpus::{gen_synthetic, ParallelCorpus, SplitCorpus};
use lowres_mt::distill::{
    pretrain_teacher, train_bridge_decoder, train_distill, Bridge, BridgeConfig, BridgeRecord, DistillConfig,
    DistillRecord,
};
use lowres_mt::transformer::{
    build_model, build_parts, train, Parts, TrainConfig, TransformerConfig, TransformerModel, ValidationSet,
};

pub const SYNTH_VOCAB: usize = 24;

pub struct Task {
    pub corpus: ParallelCorpus,
    pub bpe: BpeModel,
    pub vocab: Vocabulary,
}

/// Synthetic corpus with BPE learned to exhaustion on it.
pub fn task(n: usize, seed: u64) -> Task {
    let corpus = gen_synthetic(n, seed, SYNTH_VOCAB);
    let bpe = learn_bpe(&corpus, 5000).unwrap();
    let vocab = build_vocab(&bpe, &corpus);
    Task { corpus, bpe, vocab }
}

/// Quarter-width T1 trainer settings used for the overfit run.
pub fn overfit_config() -> TrainConfig {
    serde_json::from_value(serde_json::json!({
        "model_architecture": "T1",
        "embedding_dimension": 32,
        "epochs": 300,
        "token_batch_size": 128,
        "beam_width": 5,
        "lr_initial": 1e-3,
        "lr_min": 1e-10,
        "lr_decrease_factor": 0.5,
        "dropout": 0.0,
        "max_len": 64,
        "schedule": "constant",
        "validate_every": 10,
        "patience": 4
    }))
    .unwrap()
}

pub struct OverfitRun {
    pub model: TransformerModel<f32>,
    pub train_bleu: f64,
    pub epochs_run: usize,
    pub checkpoint: Vec<u8>,
    pub elapsed: Duration,
}

/// Trains on 64 synthetic pairs, validating on the training pairs.
pub fn overfit(task: &Task, seed: u64) -> OverfitRun {
    let start = Instant::now();
    let cfg = overfit_config();
    let mc = cfg.model_config(task.vocab.len()).unwrap();
    let model = build_model::<f32>(&mc, seed).unwrap();
    let split = SplitCorpus {
        train: task.corpus.clone(),
        valid: task.corpus.clone(),
        test: task.corpus.clone(),
        seed,
    };
    let out = train(model, &split, &task.bpe, &task.vocab, &cfg, seed, |_| {}).unwrap();
    let valid = ValidationSet::new(&task.bpe, &task.vocab, &task.corpus.pairs, mc.max_len);
    let (train_bleu, _) = valid.score(&out.best, 1.0).unwrap();
    OverfitRun {
        train_bleu,
        epochs_run: out.history.len(),
        checkpoint: out.checkpoint.to_bytes().unwrap(),
        model: out.best,
        elapsed: start.elapsed(),
    }
}

/// Two-layer quarter-width encoder used for the distillation runs.
pub fn encoder_config(vocab_size: usize) -> TransformerConfig {
    let mut c = TransformerConfig::t1_quarter(vocab_size);
    c.num_layers = 2;
    c.dropout = 0.0;
    c.max_len = 64;
    c
}

pub fn distill_config(epochs: usize) -> DistillConfig {
    serde_json::from_value(serde_json::json!({
        "epochs": epochs, "lr": 1e-3, "batch_size": 16, "teacher_epochs": 20
    }))
    .unwrap()
}

pub struct DistillRun {
    pub history: Vec<DistillRecord>,
    pub teacher_hash_before: String,
    pub teacher_hash_after: String,
    pub student: TransformerModel<f32>,
    pub elapsed: Duration,
}

/// Copy-pretrained teacher, student initialized from it, aligned on `corpus`.
pub fn distill(task: &Task, corpus: &ParallelCorpus, epochs: usize, seed: u64) -> DistillRun {
    let start = Instant::now();
    let mc = encoder_config(task.vocab.len());
    let cfg = distill_config(epochs);
    let srcs: Vec<String> = corpus.pairs.iter().map(|p| p.src.clone()).collect();
    let teacher = pretrain_teacher::<f32>(&mc, &task.bpe, &task.vocab, &srcs, &cfg, seed).unwrap();
    let teacher_hash_before = teacher.params.content_hash();
    let out = train_distill(&teacher, teacher.clone(), &task.bpe, &task.vocab, corpus, &cfg, seed, |_| {}).unwrap();
    DistillRun {
        history: out.history,
        teacher_hash_before,
        teacher_hash_after: teacher.params.content_hash(),
        student: out.student,
        elapsed: start.elapsed(),
    }
}

pub fn bridge_config() -> BridgeConfig {
    let mut c: BridgeConfig = serde_json::from_value(serde_json::json!({
        "epochs": 20, "lr": 1e-3, "token_batch_size": 256,
        "decoder_layers": 2, "decoder_heads": 4, "decoder_d_model": 48, "decoder_d_ff": 192
    }))
    .unwrap();
    c.dropout = 0.1;
    c.schedule = ScheduleKind::Linear;
    c
}

pub struct BridgeRun {
    pub history: Vec<BridgeRecord>,
    pub student_hash_before: String,
    pub student_hash_after: String,
    pub elapsed: Duration,
}

/// Distilled student, then a fresh decoder and bridge trained on 1024
/// pairs and scored on 128 held-out pairs of the same language.
pub fn bridge(seed: u64) -> BridgeRun {
    let start = Instant::now();
    let all = gen_synthetic(1024 + 128, seed, SYNTH_VOCAB);
    let train_c = ParallelCorpus::new("src", "tgt", all.pairs[..1024].to_vec());
    let eval_c = ParallelCorpus::new("src", "tgt", all.pairs[1024..].to_vec());
    let bpe = learn_bpe(&train_c, 5000).unwrap();
    let vocab = build_vocab(&bpe, &train_c);
    let t = Task {
        corpus: train_c.clone(),
        bpe,
        vocab,
    };
    let student = distill(&t, &train_c, 30, seed).student;
    let student_hash_before = student.params.content_hash();
    let cfg = bridge_config();
    let dc = cfg.decoder_config(&student.config).unwrap();
    let decoder = build_parts::<f32>(&dc, Parts::DECODER, seed + 1).unwrap();
    let bridge = Bridge::new(student.config.d_model, dc.d_model, seed + 2);
    let out = train_bridge_decoder(&student, bridge, decoder, &train_c, &eval_c, &t.bpe, &t.vocab, &cfg, seed, |_| {})
        .unwrap();
    BridgeRun {
        history: out.history,
        student_hash_before,
        student_hash_after: student.params.content_hash(),
        elapsed: start.elapsed(),
    }
}

/// Trailing means over windows of `w` consecutive values.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    values.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[1] < p[0])
}

pub fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[1] >= p[0])
}
