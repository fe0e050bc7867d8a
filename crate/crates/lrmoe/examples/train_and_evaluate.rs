//! End-to-end desk run: generate a small corpus, train a frame-routed
//! model for a couple of minutes of CPU, and report error rates and
//! language-ID accuracy per split.
//!
//! Run: cargo run --release -p lrmoe --example train_and_evaluate

use lrmoe::checkpoint;
use lrmoe::corpus::{generate_corpus, CorpusConfig};
use lrmoe::eval::evaluate;
use lrmoe::model::{ModelConfig, Variant};
use lrmoe::train::{train, TrainConfig};

fn main() {
    let corpus_cfg = CorpusConfig {
        train_utterances: 600,
        eval_mono_per_language: 40,
        eval_cs_utterances: 60,
        ..Default::default()
    };
    println!("generating corpus ({} train utterances)...", corpus_cfg.train_utterances);
    let corpus = generate_corpus(&corpus_cfg).unwrap();

    let model_cfg = ModelConfig::desk(Variant::FlrMoe, corpus_cfg.languages);
    let train_cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        warmup_steps: 80,
        ..Default::default()
    };
    let out_dir = std::env::temp_dir().join("lrmoe-train-example");
    println!(
        "training {} (d={}, {} layers, {} shared) for {} epochs...",
        model_cfg.variant, model_cfg.d, model_cfg.layers, model_cfg.shared_layers, train_cfg.epochs
    );
    let outcome = train(&model_cfg, &train_cfg, &corpus.train, &out_dir).unwrap();
    println!(
        "done: {} steps, first loss {:.3}, final loss {:.3}",
        outcome.steps,
        outcome.first_losses[0].total,
        outcome.final_loss.unwrap().total
    );

    let model = checkpoint::load(&outcome.checkpoint).unwrap();
    let report = evaluate(&model, &corpus.eval_splits, 10).unwrap();
    println!("\nsplit results (beam 10):");
    for split in &report.splits {
        println!(
            "  {:<14} TER {:>6.2}%  ({} utterances)",
            split.name, split.ter_percent, split.utterances
        );
    }
    if let Some(mer) = report.mer_percent {
        println!("  code-switch MER {mer:.2}%");
    }
    if let Some(acc) = report.lid_accuracy_percent {
        println!(
            "  utterance LID accuracy {acc:.2}% ({} degenerate routings)",
            report.degenerate_routing_count
        );
    }
    println!("\ncheckpoint: {}", outcome.checkpoint.display());
    println!("metrics   : {}", outcome.metrics.display());
}
