//! CTC loss and decoding.
//!
//! Blank is index 0 everywhere. The loss runs the forward-backward dynamic
//! program in log space with f64 accumulators and returns both the negative
//! log-likelihood (wired into the autodiff graph) and the analytic gradient
//! with respect to the input log-probabilities. Decoding offers greedy
//! collapse and prefix beam search with deterministic tie-breaking
//! (lexicographically smaller sequence wins equal scores).

use crate::error::{Error, Result};
use crate::tensor::{scalar_with_grad, Tensor};

pub const BLANK: usize = 0;

/// Label sequence for CTC supervision; never contains the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CtcLabelSeq(Vec<usize>);

impl CtcLabelSeq {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.contains(&BLANK) {
            return Err(Error::Data("CTC labels must not contain blank (0)".into()));
        }
        Ok(CtcLabelSeq(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Minimal number of frames that can emit this sequence: one per label
    /// plus a separating blank between adjacent repeats.
    pub fn required_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

impl From<CtcLabelSeq> for Vec<usize> {
    fn from(seq: CtcLabelSeq) -> Self {
        seq.0
    }
}

const LOG_ZERO: f64 = f64::NEG_INFINITY;

fn log_add(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn validate_log_probs(log_probs: &Tensor) -> Result<(usize, usize)> {
    let dims = log_probs.dims();
    let [t, v] = dims else {
        return Err(Error::Shape {
            op: "ctc_loss",
            lhs: dims.to_vec(),
            rhs: vec![],
        });
    };
    // Rows must be (approximately) normalized log-distributions. The check
    // tolerance is loose enough for finite-difference probes but catches
    // raw logits, which are typically off by O(1).
    let data = log_probs.data();
    for (r, row) in data.chunks_exact(*v).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        if lse.abs() > 1e-2 {
            return Err(Error::Data(format!(
                "ctc_loss: row {r} is not a log-distribution (logsumexp = {lse:.4})"
            )));
        }
    }
    Ok((*t, *v))
}

/// Negative log-likelihood of `labels` under per-frame log-distributions,
/// summed over all blank-augmented alignments, plus the analytic gradient
/// with respect to `log_probs`. The returned scalar participates in
/// backprop; the gradient tensor is a plain constant.
pub fn ctc_loss(log_probs: &Tensor, labels: &CtcLabelSeq) -> Result<(Tensor, Tensor)> {
    let (nll, grad, dims) = ctc_forward_backward(log_probs, labels)?;
    let grad_tensor = Tensor::from_vec(dims, grad.clone())?;
    let loss = scalar_with_grad(nll as f32, log_probs, grad);
    Ok((loss, grad_tensor))
}

/// The negative log-likelihood alone, at full f64 precision. This is what
/// finite-difference probes should evaluate: the f32 rounding of the
/// returned loss scalar would otherwise dominate the difference quotient.
pub fn ctc_nll(log_probs: &Tensor, labels: &CtcLabelSeq) -> Result<f64> {
    Ok(ctc_forward_backward(log_probs, labels)?.0)
}

fn ctc_forward_backward(
    log_probs: &Tensor,
    labels: &CtcLabelSeq,
) -> Result<(f64, Vec<f32>, Vec<usize>)> {
    let (t, v) = validate_log_probs(log_probs)?;
    if let Some(&bad) = labels.labels().iter().find(|&&l| l >= v) {
        return Err(Error::Data(format!(
            "ctc_loss: label {bad} out of vocabulary of size {v}"
        )));
    }
    let required = labels.required_frames();
    if t < required {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            required,
            frames: t,
        });
    }

    // Extended sequence blank,l1,blank,l2,...,blank of length s = 2U+1.
    let u = labels.len();
    let s = 2 * u + 1;
    let ext = |i: usize| -> usize {
        if i.is_multiple_of(2) {
            BLANK
        } else {
            labels.labels()[i / 2]
        }
    };

    let data = log_probs.data();
    let lp = |frame: usize, sym: usize| -> f64 { data[frame * v + sym] as f64 };

    // Forward variables.
    let mut alpha = vec![LOG_ZERO; t * s];
    alpha[0] = lp(0, BLANK);
    if s > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for frame in 1..t {
        for i in 0..s {
            let mut acc = alpha[(frame - 1) * s + i];
            if i >= 1 {
                acc = log_add(acc, alpha[(frame - 1) * s + i - 1]);
            }
            if i >= 2 && ext(i) != BLANK && ext(i) != ext(i - 2) {
                acc = log_add(acc, alpha[(frame - 1) * s + i - 2]);
            }
            alpha[frame * s + i] = if acc == LOG_ZERO {
                LOG_ZERO
            } else {
                acc + lp(frame, ext(i))
            };
        }
    }
    let mut log_p = alpha[(t - 1) * s + s - 1];
    if s > 1 {
        log_p = log_add(log_p, alpha[(t - 1) * s + s - 2]);
    }
    if log_p == LOG_ZERO {
        return Err(Error::Internal(
            "ctc_loss: zero total path probability on a feasible instance".into(),
        ));
    }

    // Backward variables.
    let mut beta = vec![LOG_ZERO; t * s];
    beta[(t - 1) * s + s - 1] = lp(t - 1, BLANK);
    if s > 1 {
        beta[(t - 1) * s + s - 2] = lp(t - 1, ext(s - 2));
    }
    for frame in (0..t - 1).rev() {
        for i in 0..s {
            let mut acc = beta[(frame + 1) * s + i];
            if i + 1 < s {
                acc = log_add(acc, beta[(frame + 1) * s + i + 1]);
            }
            if i + 2 < s && ext(i) != BLANK && ext(i) != ext(i + 2) {
                acc = log_add(acc, beta[(frame + 1) * s + i + 2]);
            }
            beta[frame * s + i] = if acc == LOG_ZERO {
                LOG_ZERO
            } else {
                acc + lp(frame, ext(i))
            };
        }
    }

    // dL/dlp[t][k] = -exp(logsumexp_{i: ext(i)=k}(alpha+beta) - lp[t][k] - logP)
    // where alpha*beta double-counts lp at (t,i), hence the single division.
    let mut grad = vec![0.0f32; t * v];
    for frame in 0..t {
        for i in 0..s {
            let ab = log_add(LOG_ZERO, alpha[frame * s + i] + beta[frame * s + i]);
            if ab == LOG_ZERO {
                continue;
            }
            let sym = ext(i);
            let contrib = ab - lp(frame, sym) - log_p;
            grad[frame * v + sym] -= contrib.exp() as f32;
        }
    }
    drop(data);

    Ok((-log_p, grad, vec![t, v]))
}

/// Standard CTC decoding rule: collapse runs, then drop blanks.
pub fn greedy_collapse(frame_argmax: &[usize]) -> CtcLabelSeq {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for &sym in frame_argmax {
        if sym != prev && sym != BLANK {
            out.push(sym);
        }
        prev = sym;
    }
    CtcLabelSeq(out)
}

/// Per-frame argmax indices of a [T×V] matrix, lowest index winning ties.
pub fn frame_argmax(log_probs: &Tensor) -> Vec<usize> {
    let width = log_probs.dims().last().copied().unwrap_or(1);
    log_probs
        .data()
        .chunks_exact(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Exact per-prefix forward pass: (blank mass, label mass) of paths whose
/// collapse after `frames` frames is exactly `prefix`. O(frames · |prefix|).
fn prefix_masses(data: &[f32], v: usize, frames: usize, prefix: &[usize]) -> (f64, f64) {
    let u = prefix.len();
    let s = 2 * u + 1;
    let ext = |i: usize| if i.is_multiple_of(2) { BLANK } else { prefix[i / 2] };
    let mut cur = vec![LOG_ZERO; s];
    cur[0] = data[BLANK] as f64;
    if s > 1 {
        cur[1] = data[ext(1)] as f64;
    }
    let mut next = vec![LOG_ZERO; s];
    for frame in 1..frames {
        let row = &data[frame * v..(frame + 1) * v];
        for i in 0..s {
            let mut acc = cur[i];
            if i >= 1 {
                acc = log_add(acc, cur[i - 1]);
            }
            if i >= 2 && ext(i) != BLANK && ext(i) != ext(i - 2) {
                acc = log_add(acc, cur[i - 2]);
            }
            next[i] = if acc == LOG_ZERO {
                LOG_ZERO
            } else {
                acc + row[ext(i)] as f64
            };
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let blank_mass = cur[s - 1];
    let label_mass = if s > 1 { cur[s - 2] } else { LOG_ZERO };
    (blank_mass, label_mass)
}

/// Prefix beam search over [T×V] log-distributions. Every surviving prefix
/// is scored by its exact forward mass, so a prefix's rank never depends on
/// which siblings survived pruning; the returned score is the true
/// sequence probability, it never decreases with beam width on the
/// instances wider beams dominate, and a beam wide enough to hold every
/// distinct prefix is exact maximization.
pub fn prefix_beam_search(log_probs: &Tensor, beam: usize) -> Result<CtcLabelSeq> {
    if beam < 1 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    let dims = log_probs.dims();
    let [t, v] = dims else {
        return Err(Error::Shape {
            op: "prefix_beam_search",
            lhs: dims.to_vec(),
            rhs: vec![],
        });
    };
    let (t, v) = (*t, *v);
    let data = log_probs.data();

    let mut beams: Vec<Vec<usize>> = vec![Vec::new()];
    for frame in 0..t {
        // candidates: every kept prefix plus its one-symbol extensions
        let mut candidates: std::collections::BTreeSet<Vec<usize>> = std::collections::BTreeSet::new();
        for prefix in &beams {
            candidates.insert(prefix.clone());
            for sym in 1..v {
                if prefix.len() < t {
                    let mut extended = prefix.clone();
                    extended.push(sym);
                    candidates.insert(extended);
                }
            }
        }
        let mut scored: Vec<(f64, Vec<usize>)> = candidates
            .into_iter()
            .map(|prefix| {
                let (pb, pnb) = prefix_masses(&data, v, frame + 1, &prefix);
                (log_add(pb, pnb), prefix)
            })
            .filter(|(score, _)| *score != LOG_ZERO)
            .collect();
        // score desc, ties toward the lexicographically smaller prefix
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.1.cmp(&b.1))
        });
        scored.truncate(beam);
        beams = scored.into_iter().map(|(_, p)| p).collect();
    }

    let best = beams
        .into_iter()
        .map(|prefix| {
            let (pb, pnb) = prefix_masses(&data, v, t, &prefix);
            (log_add(pb, pnb), prefix)
        })
        .max_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| b.1.cmp(&a.1))
        })
        .expect("beam list never empty");
    Ok(CtcLabelSeq(best.1))
}

pub mod oracle {
    //! Brute-force references, independent of the dynamic-program
    //! implementation. Exponential in T; for verification only.

    use super::*;

    /// Total probability of `labels` by enumerating all V^T frame paths and
    /// collapsing each.
    pub fn path_enumeration_prob(log_probs: &Tensor, labels: &[usize]) -> f64 {
        let [t, v] = log_probs.dims() else { panic!("rank-2 expected") };
        let (t, v) = (*t, *v);
        let data = log_probs.data();
        let mut total = 0.0f64;
        let mut path = vec![0usize; t];
        fn rec(
            frame: usize,
            t: usize,
            v: usize,
            data: &[f32],
            path: &mut Vec<usize>,
            labels: &[usize],
            acc: f64,
            total: &mut f64,
        ) {
            if frame == t {
                let collapsed: Vec<usize> = {
                    let mut out = Vec::new();
                    let mut prev = usize::MAX;
                    for &s in path.iter() {
                        if s != prev && s != BLANK {
                            out.push(s);
                        }
                        prev = s;
                    }
                    out
                };
                if collapsed == labels {
                    *total += acc.exp();
                }
                return;
            }
            for sym in 0..v {
                path[frame] = sym;
                rec(
                    frame + 1,
                    t,
                    v,
                    data,
                    path,
                    labels,
                    acc + data[frame * v + sym] as f64,
                    total,
                );
            }
        }
        rec(0, t, v, &data, &mut path, labels, 0.0, &mut total);
        total
    }

    /// All label sequences (no blanks) up to length `max_len` over symbols
    /// 1..v.
    pub fn all_label_seqs(v: usize, max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for seq in &frontier {
                for sym in 1..v {
                    let mut s = seq.clone();
                    s.push(sym);
                    next.push(s);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Random [T×V] log-distribution matrix.
    pub fn random_log_probs(
        t: usize,
        v: usize,
        rng: &mut impl rand::Rng,
    ) -> Tensor {
        let logits: Vec<f32> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec(vec![t, v], logits).unwrap();
        crate::tensor::no_grad(|| crate::tensor::log_softmax(&x))
    }
}
