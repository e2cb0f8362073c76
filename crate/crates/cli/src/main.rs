//! Command-line front end: one subcommand per pipeline stage.

mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(name = "lowres-mt", version, about = "Desk-scale low-resource machine translation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a parallel corpus.
    Preprocess(PreprocessArgs),
    /// Shuffle and split into train/valid/test.
    Split(InputArgs),
    /// Learn BPE merges and a vocabulary from a corpus.
    BpeLearn(InputArgs),
    /// Segment plain text with learned merges.
    BpeApply(BpeApplyArgs),
    /// Train an encoder-decoder Transformer.
    Train(TrainArgs),
    /// Train LoRA adapters on a frozen base model.
    LoraTrain(LoraArgs),
    /// Teacher-student cross-lingual embedding distillation.
    Distill(DistillArgs),
    /// Train a bridge and decoder on a frozen distilled encoder.
    BridgeTrain(BridgeArgs),
    /// Translate sentences with a trained model.
    Translate(TranslateArgs),
    /// Score hypotheses with BLEU and chrF.
    Evaluate(EvaluateArgs),
    /// PCA projection and cosine histogram of sentence embeddings.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic parallel corpus.
    Synth(SynthArgs),
}

impl Command {
    fn out(&self) -> &std::path::Path {
        match self {
            Self::Preprocess(a) => &a.common.out,
            Self::Split(a) | Self::BpeLearn(a) => &a.common.out,
            Self::BpeApply(a) => &a.common.out,
            Self::Train(a) => &a.common.out,
            Self::LoraTrain(a) => &a.common.out,
            Self::Distill(a) => &a.common.out,
            Self::BridgeTrain(a) => &a.common.out,
            Self::Translate(a) => &a.common.out,
            Self::Evaluate(a) => &a.common.out,
            Self::Analyze(a) => &a.common.out,
            Self::Synth(a) => &a.common.out,
        }
    }

    fn run(&self) -> error::Result<serde_json::Value> {
        match self {
            Self::Preprocess(a) => preprocess_cmd(a),
            Self::Split(a) => split_cmd(a),
            Self::BpeLearn(a) => bpe_learn(a),
            Self::BpeApply(a) => bpe_apply(a),
            Self::Train(a) => train_cmd(a),
            Self::LoraTrain(a) => lora_train(a),
            Self::Distill(a) => distill_cmd(a),
            Self::BridgeTrain(a) => bridge_train(a),
            Self::Translate(a) => translate_cmd(a),
            Self::Evaluate(a) => evaluate_cmd(a),
            Self::Analyze(a) => analyze_cmd(a),
            Self::Synth(a) => synth(a),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.command.run().and_then(|summary| {
        write_summary(cli.command.out(), &summary)?;
        println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({"error": e.kind(), "code": e.code(), "message": e.to_string()});
            eprintln!("{report}");
            ExitCode::from(e.code() as u8)
        }
    }
}
