//! Model assembly: the dense baseline, the sparsely-gated top-1 mixture,
//! and the two language-routed variants, all sharing the same frontend,
//! attention sub-layers, and CTC head.
//!
//! Layer layout: the first `shared_layers` (N) encoder layers are standard;
//! the remaining L−N carry the expert FFN slot. One language-ID router is
//! computed once per utterance on the shared block's output and its routing
//! decision is reused by every expert layer. Routing is hard argmax — the
//! router's weights learn only through the auxiliary language-ID loss,
//! never through the task loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, Utterance};
use crate::ctc::{ctc_loss, frame_argmax};
use crate::encoder::{
    encoder_layer_forward_with, ffn_forward, positional_encoding, subsample, subsampled_len,
    AttentionParams, FfnParams, FrontendKind, FrontendParams, LayerNormParams,
};
use crate::error::{Error, Result};
use crate::routing::{
    balance_loss_tensor, densify_alignment, lid_logits, mle_dispatch, smoe_dispatch, smoe_gate,
    utterance_pool, BalanceStats, LidRouter, RoutingAlignment, SmoeGate,
};
use crate::tensor::{add, add_bias, log_softmax, matmul, no_grad, pick, scale, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vallina,
    Smoe,
    UlrMoe,
    FlrMoe,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Vallina => "vallina",
            Variant::Smoe => "smoe",
            Variant::UlrMoe => "ulr_moe",
            Variant::FlrMoe => "flr_moe",
        };
        f.write_str(s)
    }
}

/// Complete architecture description. Serialized into checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Total encoder layers L.
    pub layers: usize,
    /// Standard layers N before the expert block (ignored by smoe, which
    /// gates every layer; must equal `layers` for vallina).
    pub shared_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub languages: usize,
    /// Per-language token counts; the global vocabulary is 1 (blank) plus
    /// these, in disjoint contiguous ranges.
    pub vocab_sizes: Vec<usize>,
    pub feature_dim: usize,
    #[serde(default)]
    pub frontend: FrontendKind,
    pub lambda_lid: f32,
    /// CTC weight of the CTC/attention hybrid objective. Carried for
    /// config compatibility; unused here because only CTC models are built.
    pub lambda_ctc: f32,
    /// Expert count of the sparsely-gated baseline.
    pub smoe_experts: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(variant: Variant, languages: usize) -> Self {
        let layers = 4;
        ModelConfig {
            variant,
            layers,
            shared_layers: if variant == Variant::Vallina { layers } else { 2 },
            d: 64,
            heads: 4,
            d_ff: 128,
            languages,
            vocab_sizes: vec![8; languages],
            feature_dim: 16,
            frontend: FrontendKind::Conv1d,
            lambda_lid: 0.3,
            lambda_ctc: 0.3,
            smoe_experts: 4,
            seed: 1,
        }
    }

    /// Production-scale dimensions used for cost analysis: 12 layers split
    /// 6+6, d=256, 4 heads, d_ff=2048, 80-dim features, and a global
    /// vocabulary of `total_vocab` entries (blank included) split evenly
    /// across languages.
    pub fn full_scale(variant: Variant, languages: usize, total_vocab: usize) -> Self {
        let tokens = total_vocab - 1;
        let base = tokens / languages;
        let mut vocab_sizes = vec![base; languages];
        for slot in vocab_sizes.iter_mut().take(tokens % languages) {
            *slot += 1;
        }
        let layers = 12;
        ModelConfig {
            variant,
            layers,
            shared_layers: if variant == Variant::Vallina { layers } else { 6 },
            d: 256,
            heads: 4,
            d_ff: 2048,
            languages,
            vocab_sizes,
            feature_dim: 80,
            frontend: FrontendKind::Conv1d,
            lambda_lid: 0.3,
            lambda_ctc: 0.3,
            smoe_experts: 4,
            seed: 1,
        }
    }

    pub fn vocab_size(&self) -> usize {
        1 + self.vocab_sizes.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be positive".into()));
        }
        if self.shared_layers > self.layers {
            return Err(Error::Config(format!(
                "shared_layers ({}) exceeds layers ({})",
                self.shared_layers, self.layers
            )));
        }
        if self.variant == Variant::Vallina && self.shared_layers != self.layers {
            return Err(Error::Config(format!(
                "vallina requires shared_layers == layers, got {} != {}",
                self.shared_layers, self.layers
            )));
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("d must be positive and even, got {}", self.d)));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d ({}) must be divisible by heads ({})",
                self.d, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.languages == 0 {
            return Err(Error::Config("languages must be positive".into()));
        }
        if self.vocab_sizes.len() != self.languages {
            return Err(Error::Config(format!(
                "vocab_sizes has {} entries for {} languages",
                self.vocab_sizes.len(),
                self.languages
            )));
        }
        if self.vocab_sizes.contains(&0) {
            return Err(Error::Config("every language needs a nonempty vocabulary".into()));
        }
        if self.variant == Variant::Smoe && self.smoe_experts < 2 {
            return Err(Error::Config(format!(
                "smoe_experts must be at least 2, got {}",
                self.smoe_experts
            )));
        }
        if self.lambda_lid < 0.0 {
            return Err(Error::Config("lambda_lid must be non-negative".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

/// The FFN slot of one encoder layer.
pub enum FfnSlot {
    Dense(FfnParams),
    /// One FFN per language, selected by the shared router.
    Experts(Vec<FfnParams>),
    /// Independent gate plus experts (sparsely-gated baseline).
    Switch { gate: SmoeGate, experts: Vec<FfnParams> },
}

pub struct Layer {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub slot: FfnSlot,
    pub norm2: LayerNormParams,
}

pub struct Model {
    pub config: ModelConfig,
    pub frontend: FrontendParams,
    pub layers: Vec<Layer>,
    pub router: Option<LidRouter>,
    pub head_w: Tensor,
    pub head_b: Tensor,
    params: Vec<(String, Tensor)>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Model({} L={} N={} d={} params={})",
            self.config.variant,
            self.config.layers,
            self.config.shared_layers,
            self.config.d,
            self.count_params()
        )
    }
}

/// Build a model with deterministic seeded initialization: matrices uniform
/// in ±1/sqrt(fan_in), biases zero, layer norms identity.
pub fn build(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d;
    let v = config.vocab_size();

    let frontend = FrontendParams::init(config.frontend, config.feature_dim, d, &mut rng);

    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let attn = AttentionParams::init(d, &mut rng);
        let norm1 = LayerNormParams::init(d);
        let norm2 = LayerNormParams::init(d);
        let slot = match config.variant {
            Variant::Vallina => FfnSlot::Dense(FfnParams::init(d, config.d_ff, &mut rng)),
            Variant::Smoe => FfnSlot::Switch {
                gate: SmoeGate::init(d, config.smoe_experts, &mut rng),
                experts: (0..config.smoe_experts)
                    .map(|_| FfnParams::init(d, config.d_ff, &mut rng))
                    .collect(),
            },
            Variant::UlrMoe | Variant::FlrMoe => {
                if i < config.shared_layers {
                    FfnSlot::Dense(FfnParams::init(d, config.d_ff, &mut rng))
                } else {
                    FfnSlot::Experts(
                        (0..config.languages)
                            .map(|_| FfnParams::init(d, config.d_ff, &mut rng))
                            .collect(),
                    )
                }
            }
        };
        layers.push(Layer { attn, norm1, slot, norm2 });
    }

    let router = match config.variant {
        Variant::UlrMoe | Variant::FlrMoe => Some(LidRouter::init(d, config.languages, &mut rng)),
        _ => None,
    };

    let head_w = Tensor::uniform(vec![d, v], 1.0 / (d as f32).sqrt(), &mut rng);
    let head_b = Tensor::zeros(vec![v]);

    let mut model = Model {
        config: config.clone(),
        frontend,
        layers,
        router,
        head_w,
        head_b,
        params: Vec::new(),
    };
    model.params = model.collect_params();
    Ok(model)
}

/// Whether to record the backprop graph during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything one forward pass produces beyond the token posteriors.
pub struct ForwardOutput {
    /// [T'×V] row-normalized log-probabilities.
    pub asr_log_probs: Tensor,
    /// Raw router logits [T'×(K+1)] (language-routed variants only).
    pub lid_logits: Option<Tensor>,
    /// Frame-wise routing (FLR only).
    pub alignment: Option<RoutingAlignment>,
    /// Utterance-level route (ULR only).
    pub utterance_route: Option<usize>,
    /// Per-layer gate statistics (sparsely-gated baseline only).
    pub gate_stats: Option<Vec<BalanceStats>>,
    /// Differentiable mean balance loss across gated layers (smoe only).
    pub balance: Option<Tensor>,
}

/// Loss components of one training step; `total` recomposes exactly as
/// asr + lambda_lid * lid + 0.01 * balance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub asr: f32,
    pub lid: f32,
    pub balance: f32,
    pub total: f32,
}

/// Weight of the load-balance regularizer in the sparsely-gated baseline.
pub const BALANCE_WEIGHT: f32 = 0.01;

#[derive(Debug)]
pub struct StepLoss {
    /// Scalar loss wired to the graph; drive backward() on this.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// Utterances skipped because their label sequences cannot align to
    /// the subsampled frame count.
    pub skipped: usize,
}

impl Model {
    fn collect_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.frontend.named(&mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.attn.named(&format!("layers.{i}.attn"), &mut out);
            layer.norm1.named(&format!("layers.{i}.norm1"), &mut out);
            match &layer.slot {
                FfnSlot::Dense(ffn) => ffn.named(&format!("layers.{i}.ffn"), &mut out),
                FfnSlot::Experts(experts) => {
                    for (k, ffn) in experts.iter().enumerate() {
                        ffn.named(&format!("layers.{i}.experts.{}", k + 1), &mut out);
                    }
                }
                FfnSlot::Switch { gate, experts } => {
                    out.push((format!("layers.{i}.gate.weight"), gate.weight.clone()));
                    out.push((format!("layers.{i}.gate.bias"), gate.bias.clone()));
                    for (k, ffn) in experts.iter().enumerate() {
                        ffn.named(&format!("layers.{i}.smoe.{k}"), &mut out);
                    }
                }
            }
            layer.norm2.named(&format!("layers.{i}.norm2"), &mut out);
        }
        if let Some(router) = &self.router {
            router.named(&mut out);
        }
        out.push(("head.weight".into(), self.head_w.clone()));
        out.push(("head.bias".into(), self.head_b.clone()));
        out
    }

    /// Parameters in a stable order with stable names.
    pub fn named_params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    /// Exact number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Analytic forward-pass FLOPs for an input of `seconds` at
    /// `frame_rate` feature frames per second.
    pub fn count_flops(&self, seconds: f64, frame_rate: f64) -> f64 {
        crate::cost::model_flops(&self.config, seconds, frame_rate)
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    pub fn forward(&self, features: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        match mode {
            Mode::Train => self.forward_impl(features),
            Mode::Infer => no_grad(|| self.forward_impl(features)),
        }
    }

    fn forward_impl(&self, features: &Tensor) -> Result<ForwardOutput> {
        let mut x = subsample(features, &self.frontend)?;
        let frames = x.dims()[0];
        debug_assert_eq!(frames, subsampled_len(features.dims()[0]));
        let pe = positional_encoding(frames, self.config.d)?;
        x = add(&x, &pe)?;

        let n = match self.config.variant {
            Variant::Vallina | Variant::Smoe => self.config.layers,
            _ => self.config.shared_layers,
        };

        let mut gate_stats = Vec::new();
        let mut balance_terms: Vec<Tensor> = Vec::new();
        let heads = self.config.heads;

        // shared block (every layer for vallina; smoe gates all layers
        // inside the loop below instead)
        for layer in &self.layers[..n] {
            let slot = &layer.slot;
            x = encoder_layer_forward_with(
                &x,
                &layer.attn,
                &layer.norm1,
                &layer.norm2,
                heads,
                None,
                |y| match slot {
                    FfnSlot::Dense(ffn) => ffn_forward(y, ffn),
                    FfnSlot::Switch { gate, experts } => {
                        let (p, top1) = smoe_gate(y, gate)?;
                        let (loss, stats) = balance_loss_tensor(&p, &top1)?;
                        gate_stats.push(stats);
                        balance_terms.push(loss);
                        smoe_dispatch(y, &p, &top1, experts)
                    }
                    FfnSlot::Experts(_) => {
                        Err(Error::Internal("expert slot inside the shared block".into()))
                    }
                },
            )?;
        }

        // routing decision, once per utterance
        let mut lid = None;
        let mut alignment = None;
        let mut utterance_route = None;
        let routes: Option<Vec<usize>> = match self.config.variant {
            Variant::FlrMoe => {
                let router = self.router.as_ref().expect("flr model carries a router");
                let r = lid_logits(&x, router)?;
                let greedy = frame_argmax(&r);
                let align = densify_alignment(&greedy);
                let routes = align.routes.clone();
                alignment = Some(align);
                lid = Some(r);
                Some(routes)
            }
            Variant::UlrMoe => {
                let router = self.router.as_ref().expect("ulr model carries a router");
                let r = lid_logits(&x, router)?;
                let (_, route) = utterance_pool(&r)?;
                utterance_route = Some(route);
                lid = Some(r);
                Some(vec![route; frames])
            }
            _ => None,
        };

        // expert block
        for layer in &self.layers[n..] {
            let slot = &layer.slot;
            let routes = routes.as_deref();
            x = encoder_layer_forward_with(
                &x,
                &layer.attn,
                &layer.norm1,
                &layer.norm2,
                heads,
                None,
                |y| match slot {
                    FfnSlot::Experts(experts) => {
                        mle_dispatch(y, routes.expect("routes exist for expert layers"), experts)
                    }
                    _ => Err(Error::Internal("non-expert slot inside the expert block".into())),
                },
            )?;
        }

        let asr_log_probs = log_softmax(&add_bias(&matmul(&x, &self.head_w)?, &self.head_b)?);

        let balance = if balance_terms.is_empty() {
            None
        } else {
            let k = balance_terms.len() as f32;
            let mut acc = balance_terms[0].clone();
            for term in &balance_terms[1..] {
                acc = add(&acc, term)?;
            }
            Some(scale(&acc, 1.0 / k))
        };

        Ok(ForwardOutput {
            asr_log_probs,
            lid_logits: lid,
            alignment,
            utterance_route,
            gate_stats: if gate_stats.is_empty() { None } else { Some(gate_stats) },
            balance,
        })
    }

    /// Multi-task loss over a batch, graph attached. Utterances whose token
    /// or language-ID sequences cannot align to the subsampled frame count
    /// are skipped and counted; an all-infeasible batch is a data error.
    pub fn training_step(&self, batch: &[Utterance]) -> Result<StepLoss> {
        let mut asr_losses: Vec<Tensor> = Vec::new();
        let mut lid_losses: Vec<Tensor> = Vec::new();
        let mut balance_losses: Vec<Tensor> = Vec::new();
        let mut skipped = 0usize;

        let needs_lid = matches!(self.config.variant, Variant::UlrMoe | Variant::FlrMoe);

        for utt in batch {
            let frames = subsampled_len(utt.features.dims()[0]);
            let infeasible_asr = frames < utt.tokens.required_frames();
            let infeasible_lid = needs_lid
                && self.config.variant == Variant::FlrMoe
                && frames < utt.lid_labels.required_frames();
            if infeasible_asr || infeasible_lid {
                skipped += 1;
                continue;
            }

            let out = self.forward_impl(&utt.features)?;
            let (asr, _) = ctc_loss(&out.asr_log_probs, &utt.tokens)?;
            asr_losses.push(asr);

            match self.config.variant {
                Variant::FlrMoe => {
                    let r = out.lid_logits.as_ref().expect("flr produces lid logits");
                    let (lid, _) = ctc_loss(&log_softmax(r), &utt.lid_labels)?;
                    lid_losses.push(lid);
                }
                Variant::UlrMoe => {
                    let r = out.lid_logits.as_ref().expect("ulr produces lid logits");
                    let (pooled, _) = utterance_pool(r)?;
                    let target = ulr_target(utt);
                    let logp = log_softmax(&pooled);
                    lid_losses.push(scale(&pick(&logp, target)?, -1.0));
                }
                _ => {}
            }
            if let Some(b) = out.balance {
                balance_losses.push(b);
            }
        }

        if asr_losses.is_empty() {
            return Err(Error::Data(format!(
                "all {} utterances in the batch are infeasible for CTC alignment",
                batch.len()
            )));
        }

        let mean = |terms: &[Tensor]| -> Result<Tensor> {
            let mut acc = terms[0].clone();
            for t in &terms[1..] {
                acc = add(&acc, t)?;
            }
            Ok(scale(&acc, 1.0 / terms.len() as f32))
        };

        let asr = mean(&asr_losses)?;
        let mut total = asr.clone();
        let mut lid_value = 0.0;
        if !lid_losses.is_empty() {
            let lid = mean(&lid_losses)?;
            lid_value = lid.item();
            total = add(&total, &scale(&lid, self.config.lambda_lid))?;
        }
        let mut balance_value = 0.0;
        if !balance_losses.is_empty() {
            let balance = mean(&balance_losses)?;
            balance_value = balance.item();
            total = add(&total, &scale(&balance, BALANCE_WEIGHT))?;
        }

        let breakdown = LossBreakdown {
            asr: asr.item(),
            lid: lid_value,
            balance: balance_value,
            total: total.item(),
        };
        Ok(StepLoss {
            total,
            breakdown,
            skipped,
        })
    }

    /// Loss components only (no graph retained).
    pub fn training_loss(&self, batch: &[Utterance]) -> Result<LossBreakdown> {
        Ok(self.training_step(batch)?.breakdown)
    }
}

/// Cross-entropy target for utterance-level routing: the tagged language,
/// or the dominant token language for code-switched utterances (lowest
/// index wins ties).
pub fn ulr_target(utt: &Utterance) -> usize {
    match utt.language {
        Lang::Mono(k) => k,
        Lang::CodeSwitch => {
            let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
            for &l in utt.lid_labels.labels() {
                *counts.entry(l).or_default() += 1;
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(lang, _)| lang)
                .unwrap_or(1)
        }
    }
}

/// Exact parameter count of one FFN (used by the expert-growth identity).
pub fn ffn_param_count(config: &ModelConfig) -> usize {
    FfnParams::param_count(config.d, config.d_ff)
}

/// Exact parameter count of the shared language router.
pub fn router_param_count(config: &ModelConfig) -> usize {
    config.d * (config.languages + 1) + config.languages + 1
}
