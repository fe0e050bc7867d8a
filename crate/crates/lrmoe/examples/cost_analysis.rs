//! Parameter and FLOPs accounting at production dimensions: the expert
//! variants cost the same as the dense baseline up to one shared gate,
//! while encoder-per-language designs scale with the language count.
//!
//! Run: cargo run --release -p lrmoe --example cost_analysis

use lrmoe::cost::{cost_table, model_flops, DEFAULT_FRAME_RATE};
use lrmoe::encoder::FrontendKind;
use lrmoe::model::{ModelConfig, Variant};

fn main() {
    let mut base = ModelConfig::full_scale(Variant::FlrMoe, 4, 15492);
    base.frontend = FrontendKind::Conv2d;
    let report = cost_table(&base, 30.0, DEFAULT_FRAME_RATE);
    print!("{}", report.render());

    println!("\nrouted-encoder cost as the language count grows (same vocabulary):");
    let mut dense = ModelConfig::full_scale(Variant::Vallina, 2, 12064);
    dense.frontend = FrontendKind::Conv2d;
    let reference = model_flops(&dense, 30.0, DEFAULT_FRAME_RATE);
    for k in [2usize, 4, 8, 16] {
        let mut cfg = ModelConfig::full_scale(Variant::FlrMoe, k, 12064);
        cfg.frontend = FrontendKind::Conv2d;
        let flops = model_flops(&cfg, 30.0, DEFAULT_FRAME_RATE);
        println!(
            "  K={k:>2}: {:.2} GFLOPs ({:+.3}% over dense)",
            flops / 1e9,
            (flops - reference) / reference * 100.0
        );
    }
}
