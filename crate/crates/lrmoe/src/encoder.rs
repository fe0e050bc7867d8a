//! Transformer encoder building blocks: convolutional subsampling frontend,
//! sinusoidal positions, multi-head self-attention, position-wise FFN, and
//! the post-norm residual layer that composes them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    add, add_bias, concat_cols, im2col_1d, im2col_2d, layer_norm, masked_fill, matmul, relu,
    reshape, scale, slice_cols, softmax, transpose, Tensor,
};

pub const LN_EPS: f32 = 1e-5;
const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

/// Subsampling frontend flavor. `Conv1d` is the lightweight desk-scale
/// default: two stride-2 convolutions over time. `Conv2d` treats the
/// spectrogram as a 1-channel image and subsamples time and frequency with
/// 3x3 stride-2 kernels, the convention the full-scale cost figures assume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    #[default]
    Conv1d,
    Conv2d,
}

/// Output length after the two stride-2 convolutions.
pub fn subsampled_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

/// Frequency extent after subsampling (Conv2d frontend only).
pub fn subsampled_freq(feature_dim: usize) -> usize {
    feature_dim.div_ceil(2).div_ceil(2)
}

pub struct FrontendParams {
    pub kind: FrontendKind,
    pub feature_dim: usize,
    pub d: usize,
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl FrontendParams {
    pub fn init<R: Rng>(kind: FrontendKind, feature_dim: usize, d: usize, rng: &mut R) -> Self {
        let mat = |rows: usize, cols: usize, rng: &mut R| {
            Tensor::uniform(vec![rows, cols], 1.0 / (rows as f32).sqrt(), rng)
        };
        match kind {
            FrontendKind::Conv1d => {
                let conv1_w = mat(CONV_KERNEL * feature_dim, d, rng);
                let conv2_w = mat(CONV_KERNEL * d, d, rng);
                let proj_w = mat(d, d, rng);
                FrontendParams {
                    kind,
                    feature_dim,
                    d,
                    conv1_w,
                    conv1_b: Tensor::zeros(vec![d]),
                    conv2_w,
                    conv2_b: Tensor::zeros(vec![d]),
                    proj_w,
                    proj_b: Tensor::zeros(vec![d]),
                }
            }
            FrontendKind::Conv2d => {
                let freq = subsampled_freq(feature_dim);
                let conv1_w = mat(CONV_KERNEL * CONV_KERNEL, d, rng);
                let conv2_w = mat(CONV_KERNEL * CONV_KERNEL * d, d, rng);
                let proj_w = mat(freq * d, d, rng);
                FrontendParams {
                    kind,
                    feature_dim,
                    d,
                    conv1_w,
                    conv1_b: Tensor::zeros(vec![d]),
                    conv2_w,
                    conv2_b: Tensor::zeros(vec![d]),
                    proj_w,
                    proj_b: Tensor::zeros(vec![d]),
                }
            }
        }
    }

    pub fn named(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("frontend.conv1.weight".into(), self.conv1_w.clone()));
        out.push(("frontend.conv1.bias".into(), self.conv1_b.clone()));
        out.push(("frontend.conv2.weight".into(), self.conv2_w.clone()));
        out.push(("frontend.conv2.bias".into(), self.conv2_b.clone()));
        out.push(("frontend.proj.weight".into(), self.proj_w.clone()));
        out.push(("frontend.proj.bias".into(), self.proj_b.clone()));
    }
}

fn conv_step(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let patches = im2col_1d(x, CONV_KERNEL, CONV_STRIDE, CONV_PAD)?;
    Ok(relu(&add_bias(&matmul(&patches, w)?, b)?))
}

fn conv2d_step(
    x: &Tensor,
    width: usize,
    channels: usize,
    w: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, usize)> {
    let h_in = x.dims()[0];
    let patches = im2col_2d(x, width, channels, CONV_KERNEL, CONV_STRIDE, CONV_PAD)?;
    let out = relu(&add_bias(&matmul(&patches, w)?, b)?);
    let h_out = (h_in + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
    let w_out = (width + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
    let d = out.dims()[1];
    Ok((reshape(&out, vec![h_out, w_out * d])?, w_out))
}

/// Subsample a [T×F] feature matrix to [T'×d] with T' = ceil(ceil(T/2)/2).
pub fn subsample(features: &Tensor, fp: &FrontendParams) -> Result<Tensor> {
    let dims = features.dims();
    let [t, f] = dims else {
        return Err(Error::Shape {
            op: "subsample",
            lhs: dims.to_vec(),
            rhs: vec![],
        });
    };
    if *f != fp.feature_dim {
        return Err(Error::Shape {
            op: "subsample",
            lhs: dims.to_vec(),
            rhs: vec![fp.feature_dim],
        });
    }
    if *t < 4 {
        return Err(Error::Data(format!("utterance too short: {t} frames, need at least 4")));
    }
    match fp.kind {
        FrontendKind::Conv1d => {
            let h1 = conv_step(features, &fp.conv1_w, &fp.conv1_b)?;
            let h2 = conv_step(&h1, &fp.conv2_w, &fp.conv2_b)?;
            add_bias(&matmul(&h2, &fp.proj_w)?, &fp.proj_b)
        }
        FrontendKind::Conv2d => {
            let (h1, w1) = conv2d_step(features, *f, 1, &fp.conv1_w, &fp.conv1_b)?;
            let (h2, _) = conv2d_step(&h1, w1, fp.d, &fp.conv2_w, &fp.conv2_b)?;
            add_bias(&matmul(&h2, &fp.proj_w)?, &fp.proj_b)
        }
    }
}

/// Sinusoidal position table: pe[t][2i] = sin(t / 10000^(2i/d)),
/// pe[t][2i+1] = cos(...).
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::Usage(format!(
            "positional encoding needs an even model dim, got {d}"
        )));
    }
    let mut data = vec![0.0f32; len * d];
    for t in 0..len {
        for i in 0..d / 2 {
            let rate = (t as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[t * d + 2 * i] = rate.sin() as f32;
            data[t * d + 2 * i + 1] = rate.cos() as f32;
        }
    }
    Tensor::from_vec(vec![len, d], data)
}

pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(vec![d]),
            beta: Tensor::zeros(vec![d]),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f32).sqrt();
        AttentionParams {
            wq: Tensor::uniform(vec![d, d], bound, rng),
            wk: Tensor::uniform(vec![d, d], bound, rng),
            wv: Tensor::uniform(vec![d, d], bound, rng),
            wo: Tensor::uniform(vec![d, d], bound, rng),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }
}

/// Position-wise feed-forward parameters (one expert's worth).
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FfnParams {
            w1: Tensor::uniform(vec![d, d_ff], 1.0 / (d as f32).sqrt(), rng),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::uniform(vec![d_ff, d], 1.0 / (d_ff as f32).sqrt(), rng),
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }

    pub fn param_count(d: usize, d_ff: usize) -> usize {
        d * d_ff + d_ff + d_ff * d + d
    }
}

pub fn ffn_forward(x: &Tensor, ffn: &FfnParams) -> Result<Tensor> {
    let h = relu(&add_bias(&matmul(x, &ffn.w1)?, &ffn.b1)?);
    add_bias(&matmul(&h, &ffn.w2)?, &ffn.b2)
}

/// Multi-head scaled-dot-product self-attention. Frames where
/// `mask[j] == false` are neither attended to nor allowed to influence any
/// valid frame.
pub fn multi_head_attention(
    x: &Tensor,
    attn: &AttentionParams,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let [t, d] = x.dims() else {
        return Err(Error::Shape {
            op: "multi_head_attention",
            lhs: x.dims().to_vec(),
            rhs: vec![],
        });
    };
    let (t, d) = (*t, *d);
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {d} not divisible by {heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.len() != t {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: vec![t],
                rhs: vec![m.len()],
            });
        }
    }
    let dh = d / heads;
    let q = matmul(x, &attn.wq)?;
    let k = matmul(x, &attn.wk)?;
    let v = matmul(x, &attn.wv)?;

    // key-side mask: column j blocked for all queries when frame j invalid
    let score_mask: Option<Vec<bool>> = mask.map(|m| {
        let mut sm = vec![false; t * t];
        for (j, &valid) in m.iter().enumerate() {
            if !valid {
                for i in 0..t {
                    sm[i * t + j] = true;
                }
            }
        }
        sm
    });

    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_cols(&q, h * dh, dh)?;
        let kh = slice_cols(&k, h * dh, dh)?;
        let vh = slice_cols(&v, h * dh, dh)?;
        let mut scores = scale(&matmul(&qh, &transpose(&kh)?)?, 1.0 / (dh as f32).sqrt());
        if let Some(sm) = &score_mask {
            scores = masked_fill(&scores, sm, -1e9)?;
        }
        let weights = softmax(&scores);
        contexts.push(matmul(&weights, &vh)?);
    }
    matmul(&concat_cols(&contexts)?, &attn.wo)
}

/// One standard transformer encoder layer's parameter set.
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FfnParams,
    pub norm2: LayerNormParams,
}

impl EncoderLayerParams {
    pub fn init(d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        EncoderLayerParams {
            attn: AttentionParams::init(d, rng),
            norm1: LayerNormParams::init(d),
            ffn: FfnParams::init(d, d_ff, rng),
            norm2: LayerNormParams::init(d),
        }
    }
}

/// Post-norm residual layer: LN(x + MHSA(x)) then LN(y + FFN(y)).
pub fn encoder_layer_forward(
    x: &Tensor,
    params: &EncoderLayerParams,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let attn_out = multi_head_attention(x, &params.attn, heads, mask)?;
    let y = layer_norm(&add(x, &attn_out)?, &params.norm1.gamma, &params.norm1.beta, LN_EPS)?;
    let ffn_out = ffn_forward(&y, &params.ffn)?;
    layer_norm(&add(&y, &ffn_out)?, &params.norm2.gamma, &params.norm2.beta, LN_EPS)
}

/// Attention + norms with the FFN slot supplied by the caller (expert
/// dispatch uses this).
pub fn encoder_layer_forward_with(
    x: &Tensor,
    attn: &AttentionParams,
    norm1: &LayerNormParams,
    norm2: &LayerNormParams,
    heads: usize,
    mask: Option<&[bool]>,
    ffn_slot: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let attn_out = multi_head_attention(x, attn, heads, mask)?;
    let y = layer_norm(&add(x, &attn_out)?, &norm1.gamma, &norm1.beta, LN_EPS)?;
    let ffn_out = ffn_slot(&y)?;
    layer_norm(&add(&y, &ffn_out)?, &norm2.gamma, &norm2.beta, LN_EPS)
}
