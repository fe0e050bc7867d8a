//! Per-frame routing visualization: train a small frame-routed model, pick
//! a code-switched utterance, and dump the dominant token, language-ID
//! posterior, and densified route for every subsampled frame.
//!
//! Run: cargo run --release -p lrmoe --example inspect_routing

use lrmoe::checkpoint;
use lrmoe::corpus::{generate_corpus, CorpusConfig, Lang};
use lrmoe::eval::{render_routing_table, routing_report};
use lrmoe::model::{ModelConfig, Variant};
use lrmoe::train::{train, TrainConfig};

fn main() {
    let corpus_cfg = CorpusConfig {
        train_utterances: 600,
        eval_mono_per_language: 0,
        eval_cs_utterances: 20,
        ..Default::default()
    };
    let corpus = generate_corpus(&corpus_cfg).unwrap();

    let model_cfg = ModelConfig::desk(Variant::FlrMoe, corpus_cfg.languages);
    let train_cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        warmup_steps: 80,
        ..Default::default()
    };
    println!("training a frame-routed model ({} epochs)...", train_cfg.epochs);
    let dir = std::env::temp_dir().join("lrmoe-inspect-example");
    let outcome = train(&model_cfg, &train_cfg, &corpus.train, &dir).unwrap();
    let model = checkpoint::load(&outcome.checkpoint).unwrap();

    let (_, cs_split) = corpus
        .eval_splits
        .iter()
        .find(|(name, _)| name == "eval_cs")
        .unwrap();
    let utt = &cs_split[0];
    assert_eq!(utt.language, Lang::CodeSwitch);
    println!("\nutterance {}:", utt.id);
    println!("  tokens     : {:?}", utt.tokens.labels());
    println!("  lid labels : {:?}", utt.lid_labels.labels());
    for span in &utt.segment_spans {
        println!("  span lang {} covers tokens [{}, {})", span.lang, span.start, span.end);
    }

    let records = routing_report(&model, utt).unwrap();
    println!("\n{}", render_routing_table(&records));
    let switches: Vec<usize> = records
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].route != w[1].route)
        .map(|(t, _)| t + 1)
        .collect();
    println!("route switches at frames {switches:?}");
}
