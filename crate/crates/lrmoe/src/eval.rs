//! Metrics and analysis: edit-distance error rates, utterance-level
//! language identification from frame routing, the confusion matrix, and a
//! per-frame routing dump for inspection.
//!
//! Split-level rates pool edits across the split: total edits over total
//! reference tokens, not a per-utterance average. Code-switched references
//! pool across languages the same way, which is what the mixed error rate
//! reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, Utterance};
use crate::ctc::{frame_argmax, prefix_beam_search, CtcLabelSeq};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, Variant};
use crate::routing::RoutingAlignment;

/// Levenshtein edit counts between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Minimal-edit alignment via the standard dynamic program. Among
/// alignments tying on total edits the one with the fewest substitutions is
/// reported; that canonical choice is invariant under swapping reference
/// and hypothesis, and deletions/insertions then follow from the length
/// identity I - D = len(hyp) - len(ref).
pub fn edit_distance(reference: &CtcLabelSeq, hypothesis: &CtcLabelSeq) -> EditCounts {
    let r = reference.labels();
    let h = hypothesis.labels();
    let (n, m) = (r.len(), h.len());
    // cell = (total edits, substitutions), compared lexicographically
    let mut dp = vec![(0usize, 0usize); (n + 1) * (m + 1)];
    for i in 0..=n {
        dp[i * (m + 1)] = (i, 0);
    }
    for j in 0..=m {
        dp[j] = (j, 0);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * (m + 1) + j - 1];
            let miss = usize::from(r[i - 1] != h[j - 1]);
            let sub = (diag.0 + miss, diag.1 + miss);
            let up = dp[(i - 1) * (m + 1) + j];
            let del = (up.0 + 1, up.1);
            let left = dp[i * (m + 1) + j - 1];
            let ins = (left.0 + 1, left.1);
            dp[i * (m + 1) + j] = sub.min(del).min(ins);
        }
    }
    let (total, substitutions) = dp[n * (m + 1) + m];
    // I - D = m - n and S + D + I = total pin both counts;
    // total - S = D + I >= |m - n| keeps the subtraction in range
    let deletions = (total - substitutions + n - m) / 2;
    let insertions = total - substitutions - deletions;
    EditCounts {
        substitutions,
        deletions,
        insertions,
    }
}

/// (S+D+I)/len(ref) in percent; undefined for an empty reference.
pub fn token_error_rate(reference: &CtcLabelSeq, hypothesis: &CtcLabelSeq) -> Option<f64> {
    if reference.is_empty() {
        return None;
    }
    Some(edit_distance(reference, hypothesis).total() as f64 / reference.len() as f64 * 100.0)
}

/// Majority vote over frame routes; ties go to the lowest language index.
pub fn utterance_lid_from_routes(alignment: &RoutingAlignment) -> usize {
    let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
    for &r in &alignment.routes {
        *counts.entry(r).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(lang, _)| lang)
        .expect("routes are nonempty")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub reference_len: usize,
    pub edits: EditCounts,
    pub true_language: Option<usize>,
    pub predicted_language: Option<usize>,
    pub degenerate_routing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitReport {
    pub name: String,
    pub utterances: usize,
    /// Pooled (S+D+I) / pooled reference length, in percent.
    pub ter_percent: f64,
    pub total_edits: usize,
    pub total_reference_tokens: usize,
    /// Utterances with an empty reference, excluded from the rate.
    pub excluded_empty_reference: usize,
}

/// Evaluation summary across splits. The confusion matrix covers
/// monolingual utterances whose routing was not degenerate; row = true
/// language - 1, column = predicted - 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub splits: Vec<SplitReport>,
    /// Mixed error rate of the code-switch split, when present.
    pub mer_percent: Option<f64>,
    pub lid_accuracy_percent: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
    pub degenerate_routing_count: usize,
    pub per_utterance: Vec<UtteranceRecord>,
}

impl EvalReport {
    pub fn split(&self, name: &str) -> Option<&SplitReport> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Language prediction for one utterance, variant-dependent: frame-route
/// majority for FLR, pooled route for ULR, none otherwise.
fn predict_language(model: &Model, out: &crate::model::ForwardOutput) -> (Option<usize>, bool) {
    match model.config.variant {
        Variant::FlrMoe => {
            let align = out.alignment.as_ref().expect("flr forward carries alignment");
            (Some(utterance_lid_from_routes(align)), align.degenerate)
        }
        Variant::UlrMoe => (out.utterance_route, false),
        _ => (None, false),
    }
}

/// Decode and score every split. `beam` is the prefix-beam width.
pub fn evaluate(
    model: &Model,
    splits: &[(String, Vec<Utterance>)],
    beam: usize,
) -> Result<EvalReport> {
    let k = model.config.languages;
    let mut report_splits = Vec::new();
    let mut per_utterance = Vec::new();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut lid_seen = 0usize;
    let mut degenerate = 0usize;
    let mut mer = None;

    for (name, utterances) in splits {
        let mut edits = 0usize;
        let mut ref_tokens = 0usize;
        let mut excluded = 0usize;
        for utt in utterances {
            let out = model.forward(&utt.features, Mode::Infer)?;
            let hyp = prefix_beam_search(&out.asr_log_probs, beam)?;
            let counts = edit_distance(&utt.tokens, &hyp);
            let (predicted, was_degenerate) = predict_language(model, &out);
            if was_degenerate {
                degenerate += 1;
            }
            let true_language = match utt.language {
                Lang::Mono(l) => Some(l),
                Lang::CodeSwitch => None,
            };
            if utt.tokens.is_empty() {
                excluded += 1;
            } else {
                edits += counts.total();
                ref_tokens += utt.tokens.len();
            }
            // confusion over non-degenerate monolingual utterances
            if let (Some(t), Some(p), false) = (true_language, predicted, was_degenerate) {
                if t >= 1 && t <= k && p >= 1 && p <= k {
                    confusion[t - 1][p - 1] += 1;
                    lid_seen += 1;
                }
            }
            per_utterance.push(UtteranceRecord {
                id: utt.id.clone(),
                reference_len: utt.tokens.len(),
                edits: counts,
                true_language,
                predicted_language: predicted,
                degenerate_routing: was_degenerate,
            });
        }
        let ter = if ref_tokens > 0 {
            edits as f64 / ref_tokens as f64 * 100.0
        } else {
            0.0
        };
        if name.contains("cs") {
            mer = Some(ter);
        }
        report_splits.push(SplitReport {
            name: name.clone(),
            utterances: utterances.len(),
            ter_percent: ter,
            total_edits: edits,
            total_reference_tokens: ref_tokens,
            excluded_empty_reference: excluded,
        });
    }

    let lid_accuracy = if lid_seen > 0 {
        let trace: usize = (0..k).map(|i| confusion[i][i]).sum();
        Some(trace as f64 / lid_seen as f64 * 100.0)
    } else {
        None
    };

    Ok(EvalReport {
        splits: report_splits,
        mer_percent: mer,
        lid_accuracy_percent: lid_accuracy,
        confusion: if lid_seen > 0 { Some(confusion) } else { None },
        degenerate_routing_count: degenerate,
        per_utterance,
    })
}

/// One subsampled frame of the routing dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub asr_top: usize,
    pub asr_posterior: f32,
    pub lid_top: usize,
    pub lid_posterior: f32,
    pub route: usize,
}

/// Per-frame view of how a frame-routed model treats one utterance: the
/// dominant token and language-ID posterior next to the densified route.
pub fn routing_report(model: &Model, utterance: &Utterance) -> Result<Vec<FrameRecord>> {
    if model.config.variant != Variant::FlrMoe {
        return Err(Error::Usage(format!(
            "routing report needs a frame-routed model, got {}",
            model.config.variant
        )));
    }
    let out = model.forward(&utterance.features, Mode::Infer)?;
    let align = out.alignment.expect("flr forward carries alignment");
    let lid = out.lid_logits.expect("flr forward carries lid logits");
    let asr = out.asr_log_probs;

    let v = asr.dims()[1];
    let asr_top = frame_argmax(&asr);
    let lid_top = frame_argmax(&lid);

    // softmax over lid logits for posteriors
    let lid_post = crate::tensor::no_grad(|| crate::tensor::softmax(&lid));
    let width = lid.dims()[1];

    let asr_data = asr.data();
    let lid_data = lid_post.data();
    let mut records = Vec::with_capacity(asr_top.len());
    for t in 0..asr_top.len() {
        records.push(FrameRecord {
            frame: t,
            asr_top: asr_top[t],
            asr_posterior: asr_data[t * v + asr_top[t]].exp(),
            lid_top: lid_top[t],
            lid_posterior: lid_data[t * width + lid_top[t]],
            route: align.routes[t],
        });
    }
    Ok(records)
}

/// Aligned plain-text rendering of a routing dump.
pub fn render_routing_table(records: &[FrameRecord]) -> String {
    let mut out = String::from("frame  asr_top  asr_post  lid_top  lid_post  route\n");
    for r in records {
        out.push_str(&format!(
            "{:>5}  {:>7}  {:>8.4}  {:>7}  {:>8.4}  {:>5}\n",
            r.frame, r.asr_top, r.asr_posterior, r.lid_top, r.lid_posterior, r.route
        ));
    }
    out
}

/// Write a routing dump as JSONL, one frame per line.
pub fn write_routing_report(records: &[FrameRecord], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
