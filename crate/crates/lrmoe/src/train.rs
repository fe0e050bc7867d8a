//! Optimization: Adam with the inverse-square-root warmup schedule,
//! gradient clipping, shared-block pretraining and transfer, and the
//! epoch/batch training loop with a per-step JSONL metrics log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{splitmix, Utterance};
use crate::error::{Error, Result};
use crate::model::{build, LossBreakdown, Model, ModelConfig, Variant};
use crate::tensor::Tensor;

/// Optimization settings. Warmup defaults to the desk scale; full-scale
/// recipes use ~25k steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Utterances per optimization step.
    pub batch_size: usize,
    pub lr_scale: f32,
    pub warmup_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub grad_clip_norm: f32,
    pub seed: u64,
    /// Dense checkpoint whose frontend and first-N layers seed the target
    /// model's shared block.
    pub pretrain: Option<PathBuf>,
    /// Keep the transferred shared block frozen instead of fine-tuning it.
    pub freeze_shared: bool,
    /// Resume training from this checkpoint (with its .state sidecar when
    /// present).
    pub resume: Option<PathBuf>,
    /// Epoch index the resumed run starts at.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr_scale: 1.0,
            warmup_steps: 500,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip_norm: 5.0,
            seed: 1,
            pretrain: None,
            freeze_shared: false,
            resume: None,
            start_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root warmup: scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5).
pub fn lr_schedule(step: usize, d: usize, scale: f32, warmup: usize) -> f32 {
    assert!(step >= 1, "schedule steps are 1-based");
    let step = step as f64;
    let warmup = warmup as f64;
    let lr = scale as f64
        * (d as f64).powf(-0.5)
        * (step.powf(-0.5)).min(step * warmup.powf(-1.5));
    lr as f32
}

/// Adam moment buffers, one pair per parameter in model order.
pub struct AdamState {
    pub step: usize,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let m = model
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, m, v }
    }
}

/// Global-norm gradient clipping. Returns the pre-clip norm; when clipping
/// fires, every gradient is scaled by the same positive factor, so the
/// direction is preserved.
pub fn clip_gradients(params: &[(String, Tensor)], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for (_, t) in params {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let factor = max_norm / norm;
        for (_, t) in params {
            t.scale_grad(factor);
        }
    }
    norm
}

/// One bias-corrected Adam update over every parameter with a gradient.
/// A NaN gradient aborts the step before any parameter moves and names the
/// offending tensor. `skip` filters parameters (frozen blocks).
pub fn adam_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f32,
    config: &TrainConfig,
    skip: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, t) in params {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient(name.clone()));
            }
        }
    }
    state.step += 1;
    let step = state.step as f64;
    let bc1 = 1.0 - (config.beta1 as f64).powf(step);
    let bc2 = 1.0 - (config.beta2 as f64).powf(step);
    for (i, (name, t)) in params.iter().enumerate() {
        if skip(name) {
            continue;
        }
        let Some(g) = t.grad() else { continue };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut data = t.data_mut();
        for j in 0..g.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            data[j] -= (lr as f64 * m_hat / (v_hat.sqrt() + config.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Train a dense model on the corpus and write its checkpoint; the result
/// seeds shared blocks via `transfer_shared`.
pub fn pretrain_shared(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &[Utterance],
    out_dir: &Path,
) -> Result<PathBuf> {
    let mut dense = model_config.clone();
    dense.variant = Variant::Vallina;
    dense.shared_layers = dense.layers;
    let outcome = train(&dense, train_config, corpus, out_dir)?;
    Ok(outcome.checkpoint)
}

/// Copy the frontend and the first N layers from a dense checkpoint into
/// `target`. Validates every tensor before touching any; on mismatch the
/// model is left untouched and the error lists the incompatible tensors.
pub fn transfer_shared(ckpt: &Path, target: &Model) -> Result<usize> {
    let source = checkpoint::load(ckpt)?;
    let source_params: std::collections::BTreeMap<&str, &Tensor> = source
        .named_params()
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();

    let shared = shared_param_names(target);
    let mut pairs = Vec::new();
    let mut bad = Vec::new();
    for (name, tensor) in target.named_params() {
        if !shared.contains(name.as_str()) {
            continue;
        }
        match source_params.get(name.as_str()) {
            Some(src) if src.dims() == tensor.dims() => pairs.push((tensor, *src)),
            Some(src) => bad.push(format!(
                "{name}: source {:?} vs target {:?}",
                src.dims(),
                tensor.dims()
            )),
            None => bad.push(format!("{name}: absent from checkpoint")),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Transfer(bad.join("; ")));
    }
    for (dst, src) in &pairs {
        dst.data_mut().copy_from_slice(&src.data());
    }
    Ok(pairs.len())
}

/// Names of the parameters that make up the shared block: the frontend and
/// every tensor of the first N layers.
fn shared_param_names(model: &Model) -> std::collections::BTreeSet<String> {
    let n = model.config.shared_layers;
    model
        .named_params()
        .iter()
        .map(|(name, _)| name.clone())
        .filter(|name| {
            name.starts_with("frontend.")
                || name
                    .strip_prefix("layers.")
                    .and_then(|rest| rest.split('.').next())
                    .and_then(|idx| idx.parse::<usize>().ok())
                    .is_some_and(|idx| idx < n)
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct StepRecord {
    step: usize,
    lr: f32,
    asr: f32,
    lid: f32,
    balance: f32,
    total: f32,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub train_state: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub first_losses: Vec<LossBreakdown>,
    pub final_loss: Option<LossBreakdown>,
    pub skipped_utterances: usize,
}

/// Full training run: seeded shuffling per epoch, Adam with warmup,
/// per-step metrics JSONL, final checkpoint plus optimizer sidecar.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &[Utterance],
    out_dir: &Path,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let model = match &train_config.resume {
        Some(path) => {
            let m = checkpoint::load(path)?;
            if serde_json::to_string(&m.config)? != serde_json::to_string(model_config)? {
                return Err(Error::Config(
                    "resume checkpoint was built from a different model config".into(),
                ));
            }
            m
        }
        None => build(model_config)?,
    };

    if let Some(pretrain) = &train_config.pretrain {
        let copied = transfer_shared(pretrain, &model)?;
        eprintln!("transferred {copied} shared tensors from {}", pretrain.display());
    }

    let mut state = AdamState::new(&model);
    if let Some(resume) = &train_config.resume {
        let sidecar = resume.with_extension("state");
        if sidecar.exists() {
            let loaded = checkpoint::load_train_state(&model, &sidecar)?;
            state.step = loaded.step;
            state.m = loaded.m;
            state.v = loaded.v;
        }
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let metrics_file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(metrics_file);

    let frozen = shared_param_names(&model);
    let freeze = |name: &str| train_config.freeze_shared && frozen.contains(name);

    let mut first_losses = Vec::new();
    let mut final_loss = None;
    let mut skipped_total = 0usize;

    for epoch in train_config.start_epoch..train_config.start_epoch + train_config.epochs {
        // shuffle from identity with an epoch-indexed seed so a resumed run
        // sees exactly the order the uninterrupted run saw
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(train_config.seed, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_losses: Vec<LossBreakdown> = Vec::new();
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<Utterance> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            model.zero_grads();
            let step_loss = model.training_step(&batch)?;
            skipped_total += step_loss.skipped;
            if step_loss.skipped > 0 {
                eprintln!(
                    "epoch {epoch}: skipped {} infeasible utterance(s)",
                    step_loss.skipped
                );
            }
            step_loss.total.backward()?;
            clip_gradients(model.named_params(), train_config.grad_clip_norm);
            let lr = lr_schedule(
                state.step + 1,
                model.config.d,
                train_config.lr_scale,
                train_config.warmup_steps,
            );
            adam_step(model.named_params(), &mut state, lr, train_config, freeze)?;

            let b = step_loss.breakdown;
            serde_json::to_writer(
                &mut metrics,
                &StepRecord {
                    step: state.step,
                    lr,
                    asr: b.asr,
                    lid: b.lid,
                    balance: b.balance,
                    total: b.total,
                },
            )?;
            metrics.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;

            if first_losses.len() < 10 {
                first_losses.push(b);
            }
            epoch_losses.push(b);
            final_loss = Some(b);
        }
        let mean_total: f64 =
            epoch_losses.iter().map(|l| l.total as f64).sum::<f64>() / epoch_losses.len() as f64;
        eprintln!(
            "epoch {epoch}: {} steps, mean total loss {mean_total:.4}",
            epoch_losses.len()
        );
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let ckpt_path = out_dir.join("model.ckpt");
    checkpoint::save(&model, &ckpt_path)?;
    let state_path = ckpt_path.with_extension("state");
    checkpoint::save_train_state(
        &model,
        &checkpoint::TrainState {
            step: state.step,
            m: state.m,
            v: state.v,
        },
        &state_path,
    )?;

    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        train_state: state_path,
        metrics: metrics_path,
        steps: state.step,
        first_losses,
        final_loss,
        skipped_utterances: skipped_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn desk_corpus(n: usize) -> Vec<Utterance> {
        let cfg = CorpusConfig {
            train_utterances: n,
            eval_mono_per_language: 0,
            eval_cs_utterances: 0,
            feature_dim: 8,
            vocab_per_language: 4,
            tokens_per_utterance: (2, 4),
            ..Default::default()
        };
        generate_corpus(&cfg).unwrap().train
    }

    fn tiny_model_config(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::desk(variant, 3);
        cfg.layers = 2;
        cfg.shared_layers = if variant == Variant::Vallina { 2 } else { 1 };
        cfg.d = 16;
        cfg.heads = 2;
        cfg.d_ff = 32;
        cfg.vocab_sizes = vec![4, 4, 4];
        cfg.feature_dim = 8;
        cfg
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let w = 16;
        let before = lr_schedule(w - 1, 64, 1.0, w);
        let peak_a = lr_schedule(w, 64, 1.0, w);
        let after = lr_schedule(w + 1, 64, 1.0, w);
        // both branches agree at the crossover
        let direct = 1.0 * (64f64.powf(-0.5) * (w as f64).powf(-0.5)) as f32;
        assert!((peak_a - direct).abs() < 1e-9);
        assert!(before < peak_a && after < peak_a);
    }

    #[test]
    fn schedule_hand_value() {
        // step 1, warmup 4, d 4, scale 1 -> 0.5 * 4^{-1.5} = 0.0625
        assert!((lr_schedule(1, 4, 1.0, 4) - 0.0625).abs() < 1e-9);
    }

    #[test]
    fn schedule_monotone_around_warmup() {
        let w = 50;
        for s in 1..w {
            assert!(lr_schedule(s, 64, 1.0, w) < lr_schedule(s + 1, 64, 1.0, w));
        }
        for s in w..w + 50 {
            assert!(lr_schedule(s, 64, 1.0, w) >= lr_schedule(s + 1, 64, 1.0, w));
        }
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let model = build(&tiny_model_config(Variant::Vallina)).unwrap();
        let before: Vec<Vec<f32>> = model.named_params().iter().map(|(_, t)| t.data().clone()).collect();
        model.zero_grads();
        let mut state = AdamState::new(&model);
        adam_step(model.named_params(), &mut state, 0.1, &TrainConfig::default(), |_| false).unwrap();
        for ((_, t), b) in model.named_params().iter().zip(&before) {
            assert_eq!(&*t.data(), b);
        }
    }

    #[test]
    fn adam_first_step_hand_value() {
        // w=1, g=1, lr=0.1: bias-corrected m̂=1, v̂=1 -> w ≈ 0.9
        let w = Tensor::scalar(1.0);
        let params = vec![("w".to_string(), w.clone())];
        w.zero_grad();
        {
            let loss = crate::tensor::mul(&w, &Tensor::scalar(1.0)).unwrap();
            loss.backward().unwrap();
        }
        let mut state = AdamState {
            step: 0,
            m: vec![vec![0.0]],
            v: vec![vec![0.0]],
        };
        let cfg = TrainConfig::default();
        adam_step(&params, &mut state, 0.1, &cfg, |_| false).unwrap();
        let expect = 1.0 - 0.1 / (1.0 + cfg.eps);
        assert!((w.item() - expect).abs() < 1e-6, "{}", w.item());
    }

    #[test]
    fn nan_gradient_aborts_with_parameter_name() {
        let w = Tensor::scalar(1.0);
        let params = vec![("layers.0.ffn.w1".to_string(), w.clone())];
        w.zero_grad();
        w.accumulate_grad(&[f32::NAN]);
        let mut state = AdamState {
            step: 0,
            m: vec![vec![0.0]],
            v: vec![vec![0.0]],
        };
        let err = adam_step(&params, &mut state, 0.1, &TrainConfig::default(), |_| false).unwrap_err();
        assert!(err.to_string().contains("layers.0.ffn.w1"), "{err}");
        assert_eq!(w.item(), 1.0, "parameter moved despite abort");
    }

    #[test]
    fn clipping_preserves_direction() {
        let a = Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap();
        a.zero_grad();
        a.accumulate_grad(&[3.0, 4.0]);
        let params = vec![("a".to_string(), a.clone())];
        let norm = clip_gradients(&params, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let g = a.grad().unwrap();
        // scaled to unit norm, same direction
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn transfer_copies_shared_block_and_leaves_experts_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = desk_corpus(8);
        let dense_cfg = tiny_model_config(Variant::Vallina);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let ckpt = pretrain_shared(&dense_cfg, &tc, &corpus, dir.path()).unwrap();

        let mut flr_cfg = tiny_model_config(Variant::FlrMoe);
        flr_cfg.seed = 999;
        let flr = build(&flr_cfg).unwrap();
        let copied = transfer_shared(&ckpt, &flr).unwrap();
        assert!(copied > 0);

        let source = checkpoint::load(&ckpt).unwrap();
        let source_map: std::collections::BTreeMap<&str, &Tensor> = source
            .named_params()
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        for (name, t) in flr.named_params() {
            if name.starts_with("frontend.") || name.starts_with("layers.0.") {
                let src = source_map[name.as_str()];
                let (a, b) = (t.data(), src.data());
                assert!(
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{name} not copied bit-exactly"
                );
            }
            if name.contains(".experts.") {
                // fresh expert tensors must differ from every source tensor
                for (sname, src) in source.named_params() {
                    if src.dims() == t.dims() {
                        let (a, b) = (t.data(), src.data());
                        assert!(
                            a.iter().zip(b.iter()).any(|(x, y)| x != y),
                            "{name} equals source {sname}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn transfer_dim_mismatch_leaves_model_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = desk_corpus(8);
        let dense_cfg = tiny_model_config(Variant::Vallina);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let ckpt = pretrain_shared(&dense_cfg, &tc, &corpus, dir.path()).unwrap();

        let mut wide = tiny_model_config(Variant::FlrMoe);
        wide.d = 32;
        let target = build(&wide).unwrap();
        let before: Vec<Vec<f32>> =
            target.named_params().iter().map(|(_, t)| t.data().clone()).collect();
        let err = transfer_shared(&ckpt, &target).unwrap_err();
        assert!(matches!(err, Error::Transfer(_)), "{err}");
        for ((_, t), b) in target.named_params().iter().zip(&before) {
            assert_eq!(&*t.data(), b, "model mutated on failed transfer");
        }
    }

    #[test]
    fn fixed_seed_training_is_bit_reproducible() {
        let corpus = desk_corpus(12);
        let cfg = tiny_model_config(Variant::FlrMoe);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let out = train(&cfg, &tc, &corpus, dir.path()).unwrap();
            out.first_losses
                .iter()
                .map(|l| l.total.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_within_first_epochs() {
        let corpus = desk_corpus(24);
        let cfg = tiny_model_config(Variant::Vallina);
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            warmup_steps: 6,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &tc, &corpus, dir.path()).unwrap();
        let first = out.first_losses[0].total;
        let last = out.final_loss.unwrap().total;
        assert!(
            last < first,
            "loss failed to decrease: {first} -> {last}"
        );
    }

    #[test]
    fn vallina_reports_zero_lid_every_step() {
        let corpus = desk_corpus(8);
        let cfg = tiny_model_config(Variant::Vallina);
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &tc, &corpus, dir.path()).unwrap();
        assert!(out.first_losses.iter().all(|l| l.lid == 0.0));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let corpus = desk_corpus(12);
        let cfg = tiny_model_config(Variant::FlrMoe);

        // uninterrupted: 3 epochs
        let dir_a = tempfile::tempdir().unwrap();
        let tc_full = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let full = train(&cfg, &tc_full, &corpus, dir_a.path()).unwrap();

        // interrupted: 2 epochs, then resume for 1
        let dir_b = tempfile::tempdir().unwrap();
        let tc_part = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let part = train(&cfg, &tc_part, &corpus, dir_b.path()).unwrap();
        let dir_c = tempfile::tempdir().unwrap();
        let tc_resume = TrainConfig {
            epochs: 1,
            batch_size: 4,
            resume: Some(part.checkpoint.clone()),
            start_epoch: 2,
            ..Default::default()
        };
        let resumed = train(&cfg, &tc_resume, &corpus, dir_c.path()).unwrap();

        // the resumed epoch's first step must equal the full run's step at
        // the same position
        let full_metrics = std::fs::read_to_string(&full.metrics).unwrap();
        let steps_per_epoch = 3; // 12 utterances / batch 4
        let line = full_metrics.lines().nth(2 * steps_per_epoch).unwrap();
        let full_step: serde_json::Value = serde_json::from_str(line).unwrap();
        let resumed_first = resumed.first_losses[0];
        assert_eq!(
            full_step["total"].as_f64().unwrap() as f32,
            resumed_first.total,
            "resume diverged from the uninterrupted run"
        );
    }

    #[test]
    fn freeze_shared_keeps_the_transferred_block_bit_identical() {
        let corpus = desk_corpus(12);
        let cfg = tiny_model_config(Variant::FlrMoe);
        let model = build(&cfg).unwrap();
        let before: Vec<(String, Vec<f32>)> = model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), t.data().clone()))
            .collect();
        drop(model);

        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            freeze_shared: true,
            ..Default::default()
        };
        let out = train(&cfg, &tc, &corpus, dir.path()).unwrap();
        let trained = checkpoint::load(&out.checkpoint).unwrap();
        for ((name, t), (bname, bdata)) in trained.named_params().iter().zip(&before) {
            assert_eq!(name, bname);
            let frozen = name.starts_with("frontend.") || name.starts_with("layers.0.");
            let unchanged = t
                .data()
                .iter()
                .zip(bdata)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if frozen {
                assert!(unchanged, "{name} moved despite freeze_shared");
            }
        }
        // the expert block must still have trained
        let moved = trained
            .named_params()
            .iter()
            .zip(&before)
            .filter(|((n, _), _)| n.contains(".experts.") || n.starts_with("head."))
            .any(|((_, t), (_, b))| t.data().iter().zip(b).any(|(a, x)| a != x));
        assert!(moved, "nothing outside the frozen block trained");
    }

    #[test]
    fn asr_loss_sends_no_gradient_into_the_router() {
        let corpus = desk_corpus(6);
        let mut cfg = tiny_model_config(Variant::FlrMoe);
        cfg.lambda_lid = 0.0;
        let model = build(&cfg).unwrap();
        model.zero_grads();
        let step = model.training_step(&corpus).unwrap();
        step.total.backward().unwrap();
        for (name, t) in model.named_params() {
            if name.starts_with("router.") {
                let g = t.grad().unwrap();
                assert!(
                    g.iter().all(|&v| v == 0.0),
                    "{name} received gradient from the task loss"
                );
            }
        }
    }
}
