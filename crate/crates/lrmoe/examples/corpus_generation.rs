//! Generate the synthetic multilingual corpus, inspect one code-switched
//! utterance, and round-trip it through the JSONL format.
//!
//! Run: cargo run --release -p lrmoe --example corpus_generation

use lrmoe::corpus::{
    generate_corpus, read_corpus, write_corpus, CorpusConfig, Lang,
};

fn main() {
    let config = CorpusConfig {
        train_utterances: 50,
        eval_mono_per_language: 5,
        eval_cs_utterances: 10,
        ..Default::default()
    };
    let corpus = generate_corpus(&config).unwrap();
    println!(
        "generated {} train utterances and {} eval splits",
        corpus.train.len(),
        corpus.eval_splits.len()
    );

    let cs = corpus
        .train
        .iter()
        .find(|u| u.language == Lang::CodeSwitch)
        .expect("corpus contains code-switched utterances");
    println!("\nutterance {}:", cs.id);
    println!("  tokens     : {:?}", cs.tokens.labels());
    println!("  lid labels : {:?}", cs.lid_labels.labels());
    for span in &cs.segment_spans {
        println!(
            "  span lang {} covers tokens [{}, {})",
            span.lang, span.start, span.end
        );
    }
    println!(
        "  features   : {} frames x {} dims",
        cs.features.dims()[0],
        cs.features.dims()[1]
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_corpus(&corpus.train, &path).unwrap();
    let back = read_corpus(&path).unwrap();
    let identical = corpus.train.iter().zip(&back).all(|(a, b)| {
        a.id == b.id
            && a.features
                .data()
                .iter()
                .zip(b.features.data().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    println!(
        "\nJSONL round-trip of {} utterances bit-identical: {identical}",
        back.len()
    );
}
