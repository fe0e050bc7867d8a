//! Synthetic multilingual and code-switching corpus.
//!
//! Each language owns a disjoint token range in one global vocabulary
//! (index 0 is the CTC blank) and a set of per-token emission mean vectors.
//! Language identity lives in the first K feature dimensions (language k's
//! centroid is `margin` along axis k-1); token identity lives in the
//! remaining dimensions through base vectors shared across languages, so a
//! frame resolves to a token only once its language is known. Utterance
//! features repeat each token's emission mean for a few frames plus
//! Gaussian noise.
//!
//! Persistence is JSONL, one utterance object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::CtcLabelSeq;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Corpus generator settings. Ranges are inclusive.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub languages: usize,
    pub vocab_per_language: usize,
    pub feature_dim: usize,
    /// Distance of each language centroid from the origin along its own axis.
    pub margin: f32,
    /// Scale of the shared per-token base vectors; smaller values bury
    /// token identity deeper in the noise so model capacity matters.
    #[serde(default = "default_token_scale")]
    pub token_scale: f32,
    pub noise_sigma: f32,
    /// Feature frames emitted per token, before subsampling.
    pub frames_per_token: (usize, usize),
    pub tokens_per_utterance: (usize, usize),
    pub train_utterances: usize,
    pub eval_mono_per_language: usize,
    pub eval_cs_utterances: usize,
    /// Fraction of training utterances that code-switch.
    pub code_switch_fraction: f32,
    pub seed: u64,
}

fn default_token_scale() -> f32 {
    1.0
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            languages: 3,
            vocab_per_language: 8,
            feature_dim: 16,
            margin: 1.0,
            token_scale: 1.0,
            noise_sigma: 0.3,
            frames_per_token: (8, 12),
            tokens_per_utterance: (6, 10),
            train_utterances: 2000,
            eval_mono_per_language: 80,
            eval_cs_utterances: 160,
            code_switch_fraction: 0.35,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.languages < 1 {
            return Err(Error::Config("languages must be at least 1".into()));
        }
        if self.vocab_per_language < 1 {
            return Err(Error::Config("vocab_per_language must be at least 1".into()));
        }
        if self.feature_dim <= self.languages {
            return Err(Error::Config(format!(
                "feature_dim ({}) must exceed languages ({}) to leave room for token structure",
                self.feature_dim, self.languages
            )));
        }
        if self.frames_per_token.0 < 1 || self.frames_per_token.0 > self.frames_per_token.1 {
            return Err(Error::Config("frames_per_token range is empty".into()));
        }
        if self.tokens_per_utterance.0 < 1
            || self.tokens_per_utterance.0 > self.tokens_per_utterance.1
        {
            return Err(Error::Config("tokens_per_utterance range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.code_switch_fraction) {
            return Err(Error::Config("code_switch_fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Global vocabulary size: blank plus every language's tokens.
    pub fn vocab_size(&self) -> usize {
        1 + self.languages * self.vocab_per_language
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        vec![self.vocab_per_language; self.languages]
    }
}

/// Token range of language `lang` (1-based) in a global vocabulary built
/// from per-language sizes.
pub fn language_range(vocab_sizes: &[usize], lang: usize) -> Range<usize> {
    let start = 1 + vocab_sizes[..lang - 1].iter().sum::<usize>();
    start..start + vocab_sizes[lang - 1]
}

/// Language owning `token` under the vocabulary partition, if any.
pub fn token_language(vocab_sizes: &[usize], token: usize) -> Option<usize> {
    if token == 0 {
        return None;
    }
    let mut start = 1;
    for (i, &size) in vocab_sizes.iter().enumerate() {
        if token < start + size {
            return Some(i + 1);
        }
        start += size;
    }
    None
}

/// One language's emission model.
#[derive(Debug, Clone)]
pub struct LanguageSpec {
    pub id: usize,
    pub vocab_range: Range<usize>,
    /// Mean feature vector per token in this language's range.
    pub token_means: Vec<Vec<f32>>,
    pub frames_per_token: (usize, usize),
    pub noise_sigma: f32,
}

/// Build every language's emission model from the corpus settings.
/// Deterministic in `config.seed`.
pub fn language_specs(config: &CorpusConfig) -> Result<Vec<LanguageSpec>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed, 0x1a));
    let f = config.feature_dim;
    let k = config.languages;
    let vocab_sizes = config.vocab_sizes();

    // token base vectors shared across languages, confined to dims K..F
    let base: Vec<Vec<f32>> = (0..config.vocab_per_language)
        .map(|_| {
            (0..f)
                .map(|dim| {
                    if dim < k {
                        0.0
                    } else {
                        config.token_scale * gauss(&mut rng)
                    }
                })
                .collect()
        })
        .collect();

    Ok((1..=k)
        .map(|lang| {
            let token_means = base
                .iter()
                .map(|b| {
                    let mut v = b.clone();
                    v[lang - 1] += config.margin;
                    v
                })
                .collect();
            LanguageSpec {
                id: lang,
                vocab_range: language_range(&vocab_sizes, lang),
                token_means,
                frames_per_token: config.frames_per_token,
                noise_sigma: config.noise_sigma,
            }
        })
        .collect())
}

fn gauss(rng: &mut impl Rng) -> f32 {
    // Box-Muller; two uniforms per sample keeps the stream simple
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

/// Stateless seed derivation for per-utterance RNGs.
pub fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Utterance language tag: one language or code-switched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lang {
    Mono(usize),
    CodeSwitch,
}

impl Serialize for Lang {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lang::Mono(k) => s.serialize_u64(*k as u64),
            Lang::CodeSwitch => s.serialize_str("cs"),
        }
    }
}

impl<'de> Deserialize<'de> for Lang {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let v = serde_json::Value::deserialize(d)?;
        match v {
            serde_json::Value::Number(n) => n
                .as_u64()
                .map(|k| Lang::Mono(k as usize))
                .ok_or_else(|| D::Error::custom("language must be a positive integer or \"cs\"")),
            serde_json::Value::String(s) if s == "cs" => Ok(Lang::CodeSwitch),
            other => Err(D::Error::custom(format!("bad language tag: {other}"))),
        }
    }
}

/// Contiguous same-language token span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpan {
    pub lang: usize,
    pub start: usize,
    /// Exclusive end index into the token sequence.
    pub end: usize,
}

/// One synthetic utterance with features, labels, and provenance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub tokens: CtcLabelSeq,
    pub lid_labels: CtcLabelSeq,
    pub language: Lang,
    pub segment_spans: Vec<SegmentSpan>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    language: Lang,
    tokens: Vec<usize>,
    lid_labels: Vec<usize>,
    segment_spans: Vec<SegmentSpan>,
    frames: Vec<Vec<f32>>,
}

/// What to generate: a monolingual utterance of one language, or an
/// intra-utterance code-switched one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UtteranceKind {
    Mono(usize),
    CodeSwitch,
}

/// Generate one utterance. Deterministic in `seed`.
pub fn generate_utterance(
    specs: &[LanguageSpec],
    kind: UtteranceKind,
    len_tokens: usize,
    seed: u64,
) -> Result<Utterance> {
    if len_tokens < 1 {
        return Err(Error::Usage("len_tokens must be at least 1".into()));
    }
    let k = specs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let spans: Vec<SegmentSpan> = match kind {
        UtteranceKind::Mono(lang) => {
            if lang < 1 || lang > k {
                return Err(Error::Usage(format!(
                    "mono language {lang} out of range 1..={k}"
                )));
            }
            vec![SegmentSpan {
                lang,
                start: 0,
                end: len_tokens,
            }]
        }
        UtteranceKind::CodeSwitch => {
            if k < 2 {
                return Err(Error::Usage(
                    "code-switching needs at least 2 languages".into(),
                ));
            }
            let segments = rng.gen_range(2..=4usize).min(len_tokens);
            // random composition of len_tokens into `segments` positive parts
            let mut cuts: Vec<usize> = (1..len_tokens).collect();
            // partial Fisher-Yates to pick segment boundaries
            for i in 0..segments - 1 {
                let j = rng.gen_range(i..cuts.len());
                cuts.swap(i, j);
            }
            let mut bounds: Vec<usize> = cuts[..segments - 1].to_vec();
            bounds.sort_unstable();
            bounds.insert(0, 0);
            bounds.push(len_tokens);

            let mut lang = rng.gen_range(1..=k);
            let mut spans = Vec::with_capacity(segments);
            for w in bounds.windows(2) {
                spans.push(SegmentSpan {
                    lang,
                    start: w[0],
                    end: w[1],
                });
                // next language differs from the current one
                let mut next = rng.gen_range(1..=k - 1);
                if next >= lang {
                    next += 1;
                }
                lang = next;
            }
            spans
        }
    };

    let mut tokens = Vec::with_capacity(len_tokens);
    let mut lid_labels = Vec::with_capacity(len_tokens);
    let mut frames: Vec<f32> = Vec::new();
    let feature_dim = specs[0].token_means[0].len();
    let mut n_frames = 0usize;
    for span in &spans {
        let spec = &specs[span.lang - 1];
        for _ in span.start..span.end {
            let local = rng.gen_range(0..spec.token_means.len());
            tokens.push(spec.vocab_range.start + local);
            lid_labels.push(span.lang);
            let reps = rng.gen_range(spec.frames_per_token.0..=spec.frames_per_token.1);
            let mean = &spec.token_means[local];
            for _ in 0..reps {
                for &m in mean {
                    frames.push(m + spec.noise_sigma * gauss(&mut rng));
                }
                n_frames += 1;
            }
        }
    }

    Ok(Utterance {
        id: format!("u{seed:016x}"),
        features: Tensor::from_vec(vec![n_frames, feature_dim], frames)?,
        tokens: CtcLabelSeq::new(tokens)?,
        lid_labels: CtcLabelSeq::new(lid_labels)?,
        language: match kind {
            UtteranceKind::Mono(lang) => Lang::Mono(lang),
            UtteranceKind::CodeSwitch => Lang::CodeSwitch,
        },
        segment_spans: spans,
    })
}

/// Map tokens to their languages under the vocabulary partition.
pub fn derive_lid_labels(tokens: &CtcLabelSeq, vocab_sizes: &[usize]) -> Result<CtcLabelSeq> {
    let labels = tokens
        .labels()
        .iter()
        .map(|&tok| {
            token_language(vocab_sizes, tok).ok_or_else(|| {
                Error::Data(format!("token {tok} falls outside every language range"))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    CtcLabelSeq::new(labels)
}

/// Generated corpus: one training pile plus per-language and code-switch
/// evaluation splits.
pub struct Corpus {
    pub train: Vec<Utterance>,
    /// (split name, utterances): eval_mono_1..K then eval_cs.
    pub eval_splits: Vec<(String, Vec<Utterance>)>,
}

/// Generate the full corpus described by `config`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let specs = language_specs(config)?;
    let mut index = 0u64;
    let mut next_seed = |tag: u64| {
        index += 1;
        splitmix(config.seed, (tag << 32) | index)
    };

    let mut train = Vec::with_capacity(config.train_utterances);
    for i in 0..config.train_utterances {
        let seed = next_seed(1);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 99));
        let len = rng.gen_range(config.tokens_per_utterance.0..=config.tokens_per_utterance.1);
        let kind = if config.languages >= 2
            && rng.gen_range(0.0..1.0f32) < config.code_switch_fraction
        {
            UtteranceKind::CodeSwitch
        } else {
            UtteranceKind::Mono(rng.gen_range(1..=config.languages))
        };
        let mut utt = generate_utterance(&specs, kind, len, seed)?;
        utt.id = format!("train-{i:05}");
        train.push(utt);
    }

    let mut eval_splits = Vec::new();
    for lang in 1..=config.languages {
        let mut split = Vec::with_capacity(config.eval_mono_per_language);
        for i in 0..config.eval_mono_per_language {
            let seed = next_seed(2);
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 99));
            let len = rng.gen_range(config.tokens_per_utterance.0..=config.tokens_per_utterance.1);
            let mut utt = generate_utterance(&specs, UtteranceKind::Mono(lang), len, seed)?;
            utt.id = format!("eval-mono{lang}-{i:05}");
            split.push(utt);
        }
        eval_splits.push((format!("eval_mono_{lang}"), split));
    }
    if config.languages >= 2 && config.eval_cs_utterances > 0 {
        let mut split = Vec::with_capacity(config.eval_cs_utterances);
        for i in 0..config.eval_cs_utterances {
            let seed = next_seed(3);
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed, 99));
            let len = rng.gen_range(
                config.tokens_per_utterance.0.max(2)..=config.tokens_per_utterance.1.max(2),
            );
            let mut utt = generate_utterance(&specs, UtteranceKind::CodeSwitch, len, seed)?;
            utt.id = format!("eval-cs-{i:05}");
            split.push(utt);
        }
        eval_splits.push(("eval_cs".to_string(), split));
    }

    Ok(Corpus { train, eval_splits })
}

/// Write utterances as JSONL, one object per line.
pub fn write_corpus(utterances: &[Utterance], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for utt in utterances {
        let feature_dim = utt.features.dims()[1];
        let frames: Vec<Vec<f32>> = utt
            .features
            .data()
            .chunks_exact(feature_dim)
            .map(|c| c.to_vec())
            .collect();
        let record = UtteranceRecord {
            id: utt.id.clone(),
            language: utt.language,
            tokens: utt.tokens.labels().to_vec(),
            lid_labels: utt.lid_labels.labels().to_vec(),
            segment_spans: utt.segment_spans.clone(),
            frames,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a JSONL corpus file; parse failures carry the 1-based line number.
pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let n_frames = record.frames.len();
        let feature_dim = record.frames.first().map(|f| f.len()).unwrap_or(0);
        if record.frames.iter().any(|f| f.len() != feature_dim) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "ragged frame rows".into(),
            });
        }
        let data: Vec<f32> = record.frames.into_iter().flatten().collect();
        out.push(Utterance {
            features: Tensor::from_vec(vec![n_frames, feature_dim], data)?,
            tokens: CtcLabelSeq::new(record.tokens).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?,
            lid_labels: CtcLabelSeq::new(record.lid_labels).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?,
            id: record.id,
            language: record.language,
            segment_spans: record.segment_spans,
        })
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> CorpusConfig {
        CorpusConfig {
            languages: 3,
            vocab_per_language: 4,
            feature_dim: 8,
            margin: 1.0,
            token_scale: 1.0,
            noise_sigma: 0.2,
            frames_per_token: (8, 10),
            tokens_per_utterance: (2, 4),
            train_utterances: 6,
            eval_mono_per_language: 2,
            eval_cs_utterances: 3,
            code_switch_fraction: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn zero_noise_features_equal_repeated_means() {
        let mut cfg = tiny_config();
        cfg.noise_sigma = 0.0;
        let specs = language_specs(&cfg).unwrap();
        let utt = generate_utterance(&specs, UtteranceKind::Mono(1), 5, 42).unwrap();
        let fd = utt.features.data();
        let mut frame = 0usize;
        for &tok in utt.tokens.labels() {
            let local = tok - specs[0].vocab_range.start;
            let mean = &specs[0].token_means[local];
            // all frames of this token equal the mean exactly
            while frame < utt.features.dims()[0] {
                let row = &fd[frame * cfg.feature_dim..(frame + 1) * cfg.feature_dim];
                if row != mean.as_slice() {
                    break;
                }
                frame += 1;
            }
        }
        assert_eq!(frame, utt.features.dims()[0], "trailing frames off-mean");
    }

    #[test]
    fn code_switch_spans_cover_tokens_with_distinct_neighbors() {
        let specs = language_specs(&tiny_config()).unwrap();
        for seed in 0..20 {
            let utt = generate_utterance(&specs, UtteranceKind::CodeSwitch, 6, seed).unwrap();
            assert_eq!(utt.segment_spans.first().unwrap().start, 0);
            assert_eq!(utt.segment_spans.last().unwrap().end, 6);
            for w in utt.segment_spans.windows(2) {
                assert_eq!(w[0].end, w[1].start, "gap between spans");
                assert_ne!(w[0].lang, w[1].lang, "adjacent spans share a language");
            }
            assert!((2..=4).contains(&utt.segment_spans.len()));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let specs = language_specs(&tiny_config()).unwrap();
        let a = generate_utterance(&specs, UtteranceKind::CodeSwitch, 5, 123).unwrap();
        let b = generate_utterance(&specs, UtteranceKind::CodeSwitch, 5, 123).unwrap();
        assert_eq!(a.id, b.id);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.segment_spans, b.segment_spans);
        let (ad, bd) = (a.features.data(), b.features.data());
        assert!(ad.iter().zip(bd.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn mono_kind_out_of_range_is_usage_error() {
        let specs = language_specs(&tiny_config()).unwrap();
        assert!(matches!(
            generate_utterance(&specs, UtteranceKind::Mono(9), 3, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn derive_lid_labels_examples() {
        // CN = 1..=10, EN = 11..=20
        let sizes = [10usize, 10];
        let toks = CtcLabelSeq::new(vec![3, 4, 17]).unwrap();
        assert_eq!(derive_lid_labels(&toks, &sizes).unwrap().labels(), &[1, 1, 2]);

        let empty = CtcLabelSeq::new(vec![]).unwrap();
        assert!(derive_lid_labels(&empty, &sizes).unwrap().is_empty());

        let mono = CtcLabelSeq::new(vec![11, 15, 20]).unwrap();
        assert_eq!(derive_lid_labels(&mono, &sizes).unwrap().labels(), &[2, 2, 2]);

        let bad = CtcLabelSeq::new(vec![21]).unwrap();
        assert!(matches!(derive_lid_labels(&bad, &sizes), Err(Error::Data(_))));
    }

    #[test]
    fn language_means_differ_by_at_least_the_margin() {
        let cfg = tiny_config();
        let specs = language_specs(&cfg).unwrap();
        let mean = |spec: &LanguageSpec| -> Vec<f32> {
            let mut acc = vec![0.0f32; cfg.feature_dim];
            for m in &spec.token_means {
                for (a, &v) in acc.iter_mut().zip(m) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / spec.token_means.len() as f32).collect()
        };
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                let (a, b) = (mean(&specs[i]), mean(&specs[j]));
                let dist: f32 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f32>()
                    .sqrt();
                assert!(
                    dist >= cfg.margin,
                    "languages {} and {} separated by only {dist}",
                    specs[i].id,
                    specs[j].id
                );
            }
        }
    }

    #[test]
    fn vocab_partition_is_a_partition() {
        let sizes = [4usize, 3, 5];
        let total: usize = sizes.iter().sum();
        for tok in 1..=total {
            let lang = token_language(&sizes, tok).expect("token must belong to a language");
            assert!(language_range(&sizes, lang).contains(&tok));
            // no other language claims it
            for other in 1..=sizes.len() {
                if other != lang {
                    assert!(!language_range(&sizes, other).contains(&tok));
                }
            }
        }
        assert!(token_language(&sizes, 0).is_none());
        assert!(token_language(&sizes, total + 1).is_none());
    }

    #[test]
    fn lid_labels_match_token_length() {
        let cfg = tiny_config();
        let corpus = generate_corpus(&cfg).unwrap();
        for utt in corpus.train.iter().chain(corpus.eval_splits.iter().flat_map(|(_, s)| s)) {
            assert_eq!(utt.lid_labels.len(), utt.tokens.len());
            let derived = derive_lid_labels(&utt.tokens, &cfg.vocab_sizes()).unwrap();
            assert_eq!(derived, utt.lid_labels);
        }
    }

    #[test]
    fn nearest_mean_classifier_is_perfect_at_zero_noise() {
        let mut cfg = tiny_config();
        cfg.noise_sigma = 0.0;
        let specs = language_specs(&cfg).unwrap();
        // all (mean, language) pairs
        let all_means: Vec<(&Vec<f32>, usize)> = specs
            .iter()
            .flat_map(|s| s.token_means.iter().map(move |m| (m, s.id)))
            .collect();
        let mut checked = 0;
        for lang in 1..=cfg.languages {
            let utt = generate_utterance(&specs, UtteranceKind::Mono(lang), 4, 77).unwrap();
            let fd = utt.features.data();
            for row in fd.chunks_exact(cfg.feature_dim) {
                let (_, best_lang) = all_means
                    .iter()
                    .map(|(m, l)| {
                        let d: f32 = row.iter().zip(m.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                        (d, *l)
                    })
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                    .unwrap();
                assert_eq!(best_lang, lang);
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn corpus_roundtrip_is_identical() {
        let cfg = tiny_config();
        let corpus = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_corpus(&corpus.train, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back.len(), corpus.train.len());
        for (a, b) in corpus.train.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.lid_labels, b.lid_labels);
            assert_eq!(a.language, b.language);
            assert_eq!(a.segment_spans, b.segment_spans);
            assert_eq!(a.features.dims(), b.features.dims());
            let (ad, bd) = (a.features.data(), b.features.data());
            assert!(
                ad.iter().zip(bd.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "feature floats changed across the JSON round-trip"
            );
        }
    }

    #[test]
    fn truncated_file_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"a\", \"language\": 1, \"tokens\": [1]").unwrap();
        match read_corpus(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());
    }
}
