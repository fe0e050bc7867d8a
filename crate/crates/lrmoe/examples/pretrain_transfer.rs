//! Shared-block warm start: pretrain a dense model, copy its frontend and
//! first-N layers into a frame-routed model, and fine-tune. The transfer
//! keeps early routing stable because the language-ID gate reads features
//! that already separate tokens.
//!
//! Run: cargo run --release -p lrmoe --example pretrain_transfer

use lrmoe::checkpoint;
use lrmoe::corpus::{generate_corpus, CorpusConfig};
use lrmoe::model::{build, ModelConfig, Variant};
use lrmoe::train::{pretrain_shared, train, transfer_shared, TrainConfig};

fn main() {
    let corpus_cfg = CorpusConfig {
        train_utterances: 400,
        eval_mono_per_language: 0,
        eval_cs_utterances: 0,
        ..Default::default()
    };
    let corpus = generate_corpus(&corpus_cfg).unwrap();

    let flr_cfg = ModelConfig::desk(Variant::FlrMoe, corpus_cfg.languages);
    let stage1 = TrainConfig {
        epochs: 4,
        batch_size: 16,
        warmup_steps: 50,
        ..Default::default()
    };

    let dir = std::env::temp_dir().join("lrmoe-pretrain-example");
    println!("stage 1: pretraining a dense twin for {} epochs...", stage1.epochs);
    let dense_ckpt = pretrain_shared(&flr_cfg, &stage1, &corpus.train, &dir).unwrap();
    println!("dense checkpoint: {}", dense_ckpt.display());

    // show the copy contract directly
    let target = build(&flr_cfg).unwrap();
    let before = target.named_params()[0].1.data().clone();
    let copied = transfer_shared(&dense_ckpt, &target).unwrap();
    let after = target.named_params()[0].1.data().clone();
    println!(
        "stage 2: transferred {copied} shared tensors (frontend weight changed: {})",
        before != after
    );

    // fine-tune the routed model from the warm start
    let stage2 = TrainConfig {
        epochs: 3,
        batch_size: 16,
        warmup_steps: 50,
        pretrain: Some(dense_ckpt),
        seed: 2,
        ..Default::default()
    };
    let out = train(&flr_cfg, &stage2, &corpus.train, &dir.join("flr")).unwrap();
    println!(
        "fine-tune: first loss {:.3} -> final {:.3} over {} steps",
        out.first_losses[0].total,
        out.final_loss.unwrap().total,
        out.steps
    );

    // cold start for comparison
    let cold = train(&flr_cfg, &TrainConfig { pretrain: None, epochs: 3, batch_size: 16, warmup_steps: 50, seed: 2, ..Default::default() }, &corpus.train, &dir.join("cold")).unwrap();
    println!(
        "cold start: first loss {:.3} -> final {:.3}",
        cold.first_losses[0].total,
        cold.final_loss.unwrap().total
    );

    let _ = checkpoint::load(&out.checkpoint).unwrap();
}
