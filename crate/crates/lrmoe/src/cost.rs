//! Analytic parameter and FLOPs accounting.
//!
//! Convention (also emitted with every report): one multiply-accumulate
//! counts as 2 FLOPs; biases, residual adds, ReLU, layer-norm (5/elem) and
//! softmax (4/elem) are counted linearly; attention includes the score and
//! context matmuls per head; the expert variants evaluate exactly one
//! expert FFN per frame, so their cost over the dense baseline is the
//! single shared gate. Inputs are `seconds * frame_rate` feature frames,
//! subsampled x4 by the frontend.
//!
//! Parameter counts are closed-form sums over the same tensor shapes the
//! builder declares; `params_from_config` must match `Model::count_params`
//! exactly, and a test holds that equality.

use crate::encoder::{subsampled_freq, subsampled_len, FrontendKind};
use crate::model::{ffn_param_count, router_param_count, ModelConfig, Variant};

pub const DEFAULT_FRAME_RATE: f64 = 100.0;

const CONV_KERNEL: usize = 3;

fn linear_flops(rows: usize, in_dim: usize, out_dim: usize, bias: bool) -> f64 {
    let mac = 2.0 * rows as f64 * in_dim as f64 * out_dim as f64;
    if bias {
        mac + (rows * out_dim) as f64
    } else {
        mac
    }
}

fn frontend_flops(cfg: &ModelConfig, frames: usize) -> f64 {
    let d = cfg.d;
    let f = cfg.feature_dim;
    let t1 = frames.div_ceil(2);
    let t2 = t1.div_ceil(2);
    match cfg.frontend {
        FrontendKind::Conv1d => {
            let conv1 = linear_flops(t1, CONV_KERNEL * f, d, true) + (t1 * d) as f64;
            let conv2 = linear_flops(t2, CONV_KERNEL * d, d, true) + (t2 * d) as f64;
            let proj = linear_flops(t2, d, d, true);
            conv1 + conv2 + proj
        }
        FrontendKind::Conv2d => {
            let f1 = f.div_ceil(2);
            let f2 = f1.div_ceil(2);
            let conv1 = linear_flops(t1 * f1, CONV_KERNEL * CONV_KERNEL, d, true)
                + (t1 * f1 * d) as f64;
            let conv2 = linear_flops(t2 * f2, CONV_KERNEL * CONV_KERNEL * d, d, true)
                + (t2 * f2 * d) as f64;
            let proj = linear_flops(t2, f2 * d, d, true);
            conv1 + conv2 + proj
        }
    }
}

fn frontend_params(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let f = cfg.feature_dim;
    match cfg.frontend {
        FrontendKind::Conv1d => {
            (CONV_KERNEL * f * d + d) + (CONV_KERNEL * d * d + d) + (d * d + d)
        }
        FrontendKind::Conv2d => {
            let f2 = subsampled_freq(f);
            (CONV_KERNEL * CONV_KERNEL * d + d)
                + (CONV_KERNEL * CONV_KERNEL * d * d + d)
                + (f2 * d * d + d)
        }
    }
}

/// One standard encoder layer on `t` subsampled frames.
fn layer_flops(d: usize, heads: usize, d_ff: usize, t: usize) -> f64 {
    let qkvo = 4.0 * linear_flops(t, d, d, false);
    let scores = 2.0 * (t * t * d) as f64; // q·kT across all heads
    let scaling = (heads * t * t) as f64;
    let softmax = 4.0 * (heads * t * t) as f64;
    let context = 2.0 * (t * t * d) as f64;
    let residuals = 2.0 * (t * d) as f64;
    let norms = 2.0 * 5.0 * (t * d) as f64;
    let ffn = ffn_flops(d, d_ff, t);
    qkvo + scores + scaling + softmax + context + residuals + norms + ffn
}

fn ffn_flops(d: usize, d_ff: usize, t: usize) -> f64 {
    linear_flops(t, d, d_ff, true) + (t * d_ff) as f64 + linear_flops(t, d_ff, d, true)
}

fn layer_params(d: usize, d_ff: usize) -> usize {
    4 * d * d + 2 * (2 * d) + (d * d_ff + d_ff + d_ff * d + d)
}

fn head_flops(d: usize, v: usize, t: usize) -> f64 {
    linear_flops(t, d, v, true) + 4.0 * (t * v) as f64
}

/// Exact parameter count from the configuration alone.
pub fn params_from_config(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let v = cfg.vocab_size();
    let base_layer = layer_params(d, cfg.d_ff);
    let ffn = ffn_param_count(cfg);
    let layers: usize = match cfg.variant {
        Variant::Vallina => cfg.layers * base_layer,
        Variant::Smoe => {
            let gate = d * cfg.smoe_experts + cfg.smoe_experts;
            cfg.layers * (base_layer + (cfg.smoe_experts - 1) * ffn + gate)
        }
        Variant::UlrMoe | Variant::FlrMoe => {
            let expert_layers = cfg.layers - cfg.shared_layers;
            cfg.layers * base_layer + expert_layers * (cfg.languages - 1) * ffn
        }
    };
    let router = match cfg.variant {
        Variant::UlrMoe | Variant::FlrMoe => router_param_count(cfg),
        _ => 0,
    };
    frontend_params(cfg) + layers + router + (d * v + v)
}

/// FLOPs of one forward pass over `seconds * frame_rate` input frames.
pub fn model_flops(cfg: &ModelConfig, seconds: f64, frame_rate: f64) -> f64 {
    let frames = (seconds * frame_rate).round() as usize;
    let t = subsampled_len(frames);
    let pe = (t * cfg.d) as f64;
    let body = cfg.layers as f64 * layer_flops(cfg.d, cfg.heads, cfg.d_ff, t);
    let gates = match cfg.variant {
        Variant::Vallina => 0.0,
        // one shared language gate per utterance
        Variant::UlrMoe | Variant::FlrMoe => {
            linear_flops(t, cfg.d, cfg.languages + 1, true)
        }
        // an independent gate in every layer
        Variant::Smoe => {
            cfg.layers as f64
                * (linear_flops(t, cfg.d, cfg.smoe_experts, true)
                    + 4.0 * (t * cfg.smoe_experts) as f64
                    + (t * cfg.d) as f64)
        }
    };
    frontend_flops(cfg, frames) + pe + body + gates + head_flops(cfg.d, cfg.vocab_size(), t)
}

/// Language-aware encoder: a shared stack plus `per_language` layers run
/// for every language in parallel, fused by frame-wise addition.
pub fn lae_flops(cfg: &ModelConfig, shared: usize, per_language: usize, seconds: f64, frame_rate: f64) -> f64 {
    let frames = (seconds * frame_rate).round() as usize;
    let t = subsampled_len(frames);
    let layer = layer_flops(cfg.d, cfg.heads, cfg.d_ff, t);
    let fusion = (cfg.languages * t * cfg.d) as f64;
    frontend_flops(cfg, frames)
        + (t * cfg.d) as f64
        + (shared as f64 + (cfg.languages * per_language) as f64) * layer
        + fusion
        + head_flops(cfg.d, cfg.vocab_size(), t)
}

pub fn lae_params(cfg: &ModelConfig, shared: usize, per_language: usize) -> usize {
    let layer = layer_params(cfg.d, cfg.d_ff);
    frontend_params(cfg)
        + (shared + cfg.languages * per_language) * layer
        + (cfg.d * cfg.vocab_size() + cfg.vocab_size())
}

/// One full encoder stack per language plus a gating network that mixes
/// the per-language representations.
pub fn multi_encoder_flops(cfg: &ModelConfig, seconds: f64, frame_rate: f64) -> f64 {
    let frames = (seconds * frame_rate).round() as usize;
    let t = subsampled_len(frames);
    let layer = layer_flops(cfg.d, cfg.heads, cfg.d_ff, t);
    let gate = linear_flops(t, cfg.d, cfg.languages, true) + (cfg.languages * t * cfg.d) as f64;
    frontend_flops(cfg, frames)
        + (t * cfg.d) as f64
        + (cfg.languages * cfg.layers) as f64 * layer
        + gate
        + head_flops(cfg.d, cfg.vocab_size(), t)
}

pub fn multi_encoder_params(cfg: &ModelConfig) -> usize {
    let layer = layer_params(cfg.d, cfg.d_ff);
    frontend_params(cfg)
        + cfg.languages * cfg.layers * layer
        + (cfg.d * cfg.languages + cfg.languages)
        + (cfg.d * cfg.vocab_size() + cfg.vocab_size())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: usize,
    pub gflops: f64,
    pub notes: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CostReport {
    pub convention: String,
    pub input_seconds: f64,
    pub frame_rate: f64,
    pub frontend: FrontendKind,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "cost analysis: {:.0}s input @ {:.0} frames/s, frontend={:?}\n",
            self.input_seconds, self.frame_rate, self.frontend
        ));
        out.push_str(&format!("convention: {}\n\n", self.convention));
        out.push_str(&format!("{:<22} {:>12} {:>10}  notes\n", "model", "params", "GFLOPs"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<22} {:>12} {:>10.1}  {}\n",
                r.name,
                format_params(r.params),
                r.gflops,
                r.notes
            ));
        }
        out
    }
}

fn format_params(p: usize) -> String {
    format!("{:.1}M", p as f64 / 1e6)
}

const CONVENTION: &str = "1 MAC = 2 FLOPs; biases/ReLU/residuals linear, layer-norm 5/elem, \
softmax 4/elem; attention counts per-head score and context matmuls; expert variants run exactly \
one expert FFN per frame";

/// Comparison table across the buildable variants and the analytic
/// encoder-per-language baselines, all at `base`'s dimensions.
pub fn cost_table(base: &ModelConfig, seconds: f64, frame_rate: f64) -> CostReport {
    let mut rows = Vec::new();
    let variant_cfg = |variant: Variant| {
        let mut c = base.clone();
        c.variant = variant;
        if variant == Variant::Vallina {
            c.shared_layers = c.layers;
        } else if c.shared_layers == c.layers {
            // keep an expert block when the base config was dense
            c.shared_layers = c.layers / 2;
        }
        c
    };

    let vallina = variant_cfg(Variant::Vallina);
    rows.push(CostRow {
        name: "vallina".into(),
        params: params_from_config(&vallina),
        gflops: model_flops(&vallina, seconds, frame_rate) / 1e9,
        notes: format!("dense, L={}", vallina.layers),
    });

    let smoe = variant_cfg(Variant::Smoe);
    rows.push(CostRow {
        name: "smoe".into(),
        params: params_from_config(&smoe),
        gflops: model_flops(&smoe, seconds, frame_rate) / 1e9,
        notes: format!("{} experts/layer, per-layer gates", smoe.smoe_experts),
    });

    let ulr = variant_cfg(Variant::UlrMoe);
    rows.push(CostRow {
        name: "ulr_moe".into(),
        params: params_from_config(&ulr),
        gflops: model_flops(&ulr, seconds, frame_rate) / 1e9,
        notes: format!("K={}, utterance routing", ulr.languages),
    });

    let flr = variant_cfg(Variant::FlrMoe);
    rows.push(CostRow {
        name: "flr_moe".into(),
        params: params_from_config(&flr),
        gflops: model_flops(&flr, seconds, frame_rate) / 1e9,
        notes: format!("K={}, N={} shared, frame routing", flr.languages, flr.shared_layers),
    });

    // analytic baselines: 3/4 of the stack shared for the language-aware
    // encoder, full per-language stacks for the multi-encoder
    let lae_shared = base.layers * 3 / 4;
    let lae_per_lang = base.layers - lae_shared;
    rows.push(CostRow {
        name: "lae".into(),
        params: lae_params(base, lae_shared, lae_per_lang),
        gflops: lae_flops(base, lae_shared, lae_per_lang, seconds, frame_rate) / 1e9,
        notes: format!(
            "analytic: {lae_shared} shared + {lae_per_lang} per language, all K active"
        ),
    });
    rows.push(CostRow {
        name: "multi_encoder".into(),
        params: multi_encoder_params(base),
        gflops: multi_encoder_flops(base, seconds, frame_rate) / 1e9,
        notes: format!("analytic: {} full encoders + gating", base.languages),
    });
    let mut bi = base.clone();
    bi.languages = 2;
    bi.vocab_sizes = base.vocab_sizes.iter().take(2).copied().collect();
    if bi.vocab_sizes.len() < 2 {
        bi.vocab_sizes = vec![base.vocab_sizes[0]; 2];
    }
    rows.push(CostRow {
        name: "bi_encoder".into(),
        params: multi_encoder_params(&bi),
        gflops: multi_encoder_flops(&bi, seconds, frame_rate) / 1e9,
        notes: "analytic: 2 full encoders + gating".into(),
    });

    CostReport {
        convention: CONVENTION.into(),
        input_seconds: seconds,
        frame_rate,
        frontend: base.frontend,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    #[test]
    fn closed_form_matches_built_models_exactly() {
        for variant in [Variant::Vallina, Variant::Smoe, Variant::UlrMoe, Variant::FlrMoe] {
            let mut cfg = ModelConfig::desk(variant, 3);
            cfg.feature_dim = 12;
            let model = build(&cfg).unwrap();
            assert_eq!(
                params_from_config(&cfg),
                model.count_params(),
                "{variant} param formula drifted from the builder"
            );

            cfg.frontend = FrontendKind::Conv2d;
            let model = build(&cfg).unwrap();
            assert_eq!(params_from_config(&cfg), model.count_params());
        }
    }

    #[test]
    fn full_scale_dense_params_near_twenty_million() {
        let cfg = ModelConfig::full_scale(Variant::Vallina, 2, 12064);
        let p = params_from_config(&cfg) as f64;
        assert!((p - 19.8e6).abs() / 19.8e6 < 0.05, "params {p}");
    }

    #[test]
    fn expert_flops_overhead_is_only_the_gate() {
        let dense = ModelConfig::full_scale(Variant::Vallina, 4, 15492);
        let base = model_flops(&dense, 30.0, DEFAULT_FRAME_RATE);
        for k in [2usize, 4, 8, 16] {
            let mut flr = ModelConfig::full_scale(Variant::FlrMoe, 4, 15492);
            flr.languages = k;
            flr.vocab_sizes = ModelConfig::full_scale(Variant::FlrMoe, k, 15492).vocab_sizes;
            let cost = model_flops(&flr, 30.0, DEFAULT_FRAME_RATE);
            let rel = (cost - base) / base;
            assert!((0.0..0.01).contains(&rel), "K={k}: overhead {rel}");
        }
    }

    #[test]
    fn measured_macs_agree_with_analytic_model() {
        use crate::model::Mode;
        use crate::tensor::{mac_count, reset_mac_counter, Tensor};
        // the analytic model counts 2 FLOPs per MAC plus linear extras, so
        // measured MACs must sit just under half the analytic FLOPs
        let cfg = ModelConfig::desk(Variant::FlrMoe, 3);
        let model = build(&cfg).unwrap();
        let seconds = 0.4; // 40 frames
        let features = Tensor::zeros(vec![40, cfg.feature_dim]);
        reset_mac_counter();
        let _ = model.forward(&features, Mode::Infer).unwrap();
        let measured = mac_count() as f64 * 2.0;
        let analytic = model_flops(&cfg, seconds, DEFAULT_FRAME_RATE);
        assert!(
            measured <= analytic && measured > 0.85 * analytic,
            "measured {measured} vs analytic {analytic}"
        );
    }

    #[test]
    fn report_contains_all_rows() {
        let base = ModelConfig::full_scale(Variant::FlrMoe, 4, 15492);
        let report = cost_table(&base, 30.0, DEFAULT_FRAME_RATE);
        for name in ["vallina", "smoe", "ulr_moe", "flr_moe", "lae", "multi_encoder", "bi_encoder"] {
            assert!(report.row(name).is_some(), "missing row {name}");
        }
        let text = report.render();
        assert!(text.contains("MAC"));
    }
}
