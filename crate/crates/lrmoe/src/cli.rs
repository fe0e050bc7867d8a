//! Command-line entry point: corpus generation, training, evaluation, cost
//! analysis, and routing inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 internal
//! invariant breach. Each run writes a resolved-config snapshot beside its
//! outputs. Seed precedence: `--seed` flag, then the LRMOE_SEED
//! environment variable, then the config file.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::corpus::{self, CorpusConfig};
use crate::cost;
use crate::encoder::FrontendKind;
use crate::error::{Error, Result};
use crate::eval;
use crate::checkpoint;
use crate::model::{ModelConfig, Variant};
use crate::train::{self, TrainConfig};

pub const SEED_ENV: &str = "LRMOE_SEED";

#[derive(Parser)]
#[command(
    name = "lrmoe",
    about = "Language-routed mixture-of-experts CTC encoders at desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dot-path overrides applied to the config, e.g. --set train.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed override (wins over LRMOE_SEED and the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus: train/eval JSONL splits plus a manifest.
    GenCorpus {
        #[command(flatten)]
        common: CommonConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a model on a JSONL corpus.
    Train {
        #[command(flatten)]
        common: CommonConfigArgs,
        /// Output directory for checkpoint, metrics, and snapshot.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one or more JSONL splits.
    Eval {
        /// Model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL files; each becomes a split named after its file stem.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Prefix beam width.
        #[arg(long, default_value_t = 10)]
        beam: usize,
        #[arg(long, default_value = "eval-out")]
        out: PathBuf,
    },
    /// Print the parameter/FLOPs comparison table.
    AnalyzeCost {
        /// Model config JSON to analyze (desk dims otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Highlighted variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Language count for the table.
        #[arg(long)]
        languages: Option<usize>,
        /// Use production-scale dimensions (12 layers, d=256, d_ff=2048,
        /// conv2d subsampling convention).
        #[arg(long)]
        paper_dims: bool,
        /// Input length in seconds.
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        /// Also write the table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump per-frame routing for one utterance of a frame-routed model.
    InspectRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL corpus file to pull the utterance from.
        #[arg(long)]
        data: PathBuf,
        /// Utterance id (first utterance otherwise).
        #[arg(long)]
        utterance: Option<String>,
        #[arg(long, default_value = "routing-out")]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "vallina" => Ok(Variant::Vallina),
        "smoe" => Ok(Variant::Smoe),
        "ulr_moe" => Ok(Variant::UlrMoe),
        "flr_moe" => Ok(Variant::FlrMoe),
        other => Err(format!(
            "unknown variant {other}; expected vallina|smoe|ulr_moe|flr_moe"
        )),
    }
}

/// Parse argv and run. Returns the process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { common, out } => gen_corpus(common, &out),
        Command::Train { common, out } => run_train(common, &out),
        Command::Eval {
            checkpoint,
            data,
            beam,
            out,
        } => run_eval(&checkpoint, &data, beam, &out),
        Command::AnalyzeCost {
            config,
            variant,
            languages,
            paper_dims,
            seconds,
            out,
        } => analyze_cost(config, variant, languages, paper_dims, seconds, out),
        Command::InspectRouting {
            checkpoint,
            data,
            utterance,
            out,
        } => inspect_routing(&checkpoint, &data, utterance, &out),
    }
}

/// Load a JSON config, apply dot-path overrides, and deserialize strictly.
fn load_config<T: serde::de::DeserializeOwned + serde::Serialize>(
    path: Option<&Path>,
    overrides: &[String],
    default: impl FnOnce() -> T,
) -> Result<(T, serde_json::Value)> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => serde_json::to_value(default())?,
    };
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let typed: T = serde_json::from_value(value.clone())
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    // normalize the snapshot to the typed view
    let resolved = serde_json::to_value(&typed)?;
    Ok((typed, resolved))
}

fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {spec}")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Usage(format!("--set path {path} walks through a non-object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("empty --set path");
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got {s}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    Ok(match flag {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn write_snapshot(out_dir: &Path, resolved: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("resolved_config.json");
    std::fs::write(&path, serde_json::to_string_pretty(resolved)?)
        .map_err(|e| Error::io(&path, e))
}

fn gen_corpus(common: CommonConfigArgs, out: &Path) -> Result<()> {
    let (mut config, _) = load_config::<CorpusConfig>(
        common.config.as_deref(),
        &common.overrides,
        CorpusConfig::default,
    )?;
    if let Some(seed) = resolve_seed(common.seed)? {
        config.seed = seed;
    }
    config.validate()?;
    write_snapshot(out, &serde_json::to_value(&config)?)?;

    let corpus = corpus::generate_corpus(&config)?;
    let train_path = out.join("train.jsonl");
    corpus::write_corpus(&corpus.train, &train_path)?;
    let mut manifest = serde_json::json!({
        "config": config,
        "splits": { "train": { "path": "train.jsonl", "utterances": corpus.train.len() } },
    });
    for (name, split) in &corpus.eval_splits {
        let path = out.join(format!("{name}.jsonl"));
        corpus::write_corpus(split, &path)?;
        manifest["splits"][name] = serde_json::json!({
            "path": format!("{name}.jsonl"),
            "utterances": split.len(),
        });
    }
    let manifest_path = out.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&manifest_path, e))?;
    println!(
        "wrote {} train and {} eval split(s) under {}",
        corpus.train.len(),
        corpus.eval_splits.len(),
        out.display()
    );
    Ok(())
}

/// Combined config for the train subcommand.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    data: TrainDataConfig,
}

#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDataConfig {
    train: PathBuf,
    #[serde(default)]
    eval: Vec<PathBuf>,
}

fn run_train(common: CommonConfigArgs, out: &Path) -> Result<()> {
    let config_path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Usage("train requires --config".into()))?;
    let (mut config, _) =
        load_config::<TrainFileConfig>(Some(config_path), &common.overrides, || unreachable!())?;
    if let Some(seed) = resolve_seed(common.seed)? {
        config.model.seed = seed;
        config.train.seed = seed;
    }
    config.model.validate()?;
    config.train.validate()?;
    write_snapshot(out, &serde_json::to_value(&config)?)?;

    let corpus = corpus::read_corpus(&config.data.train)?;
    let outcome = train::train(&config.model, &config.train, &corpus, out)?;
    println!(
        "trained {} steps; checkpoint {}",
        outcome.steps,
        outcome.checkpoint.display()
    );

    if !config.data.eval.is_empty() {
        let model = checkpoint::load(&outcome.checkpoint)?;
        let splits = read_splits(&config.data.eval)?;
        let report = eval::evaluate(&model, &splits, 10)?;
        let report_path = out.join("eval_report.json");
        std::fs::write(&report_path, report.to_json()?)
            .map_err(|e| Error::io(&report_path, e))?;
        for split in &report.splits {
            println!("{}: TER {:.2}%", split.name, split.ter_percent);
        }
    }
    Ok(())
}

fn read_splits(paths: &[PathBuf]) -> Result<Vec<(String, Vec<corpus::Utterance>)>> {
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            Ok((name, corpus::read_corpus(p)?))
        })
        .collect()
}

fn run_eval(ckpt: &Path, data: &[PathBuf], beam: usize, out: &Path) -> Result<()> {
    if beam < 1 {
        return Err(Error::Usage("beam must be at least 1".into()));
    }
    let model = checkpoint::load(ckpt)?;
    let splits = read_splits(data)?;
    write_snapshot(
        out,
        &serde_json::json!({
            "checkpoint": ckpt,
            "data": data,
            "beam": beam,
        }),
    )?;
    let report = eval::evaluate(&model, &splits, beam)?;
    let report_path = out.join("eval_report.json");
    std::fs::write(&report_path, report.to_json()?).map_err(|e| Error::io(&report_path, e))?;
    for split in &report.splits {
        println!(
            "{}: TER {:.2}% over {} utterances",
            split.name, split.ter_percent, split.utterances
        );
    }
    if let Some(mer) = report.mer_percent {
        println!("code-switch MER: {mer:.2}%");
    }
    if let Some(acc) = report.lid_accuracy_percent {
        println!(
            "utterance LID accuracy: {acc:.2}% ({} degenerate)",
            report.degenerate_routing_count
        );
    }
    println!("report: {}", report_path.display());
    Ok(())
}

fn analyze_cost(
    config: Option<PathBuf>,
    variant: Option<Variant>,
    languages: Option<usize>,
    paper_dims: bool,
    seconds: f64,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut base = match config {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let cfg: ModelConfig = serde_json::from_str(&text)?;
            cfg.validate()?;
            cfg
        }
        None if paper_dims => {
            let k = languages.unwrap_or(4);
            let vocab = if k == 2 { 12064 } else { 3873 * k + 1 };
            let mut cfg = ModelConfig::full_scale(variant.unwrap_or(Variant::FlrMoe), k, vocab);
            cfg.frontend = FrontendKind::Conv2d;
            cfg
        }
        None => ModelConfig::desk(variant.unwrap_or(Variant::FlrMoe), languages.unwrap_or(3)),
    };
    if let Some(k) = languages {
        if base.languages != k {
            let per = base.vocab_sizes.first().copied().unwrap_or(8);
            base.languages = k;
            base.vocab_sizes = vec![per; k];
        }
    }
    if let Some(v) = variant {
        base.variant = v;
        if v == Variant::Vallina {
            base.shared_layers = base.layers;
        }
    }
    let report = cost::cost_table(&base, seconds, cost::DEFAULT_FRAME_RATE);
    print!("{}", report.render());
    if let Some(path) = out {
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&path, e))?;
        println!("json report: {}", path.display());
    }
    Ok(())
}

fn inspect_routing(
    ckpt: &Path,
    data: &Path,
    utterance: Option<String>,
    out: &Path,
) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let utterances = corpus::read_corpus(data)?;
    let utt = match &utterance {
        Some(id) => utterances
            .iter()
            .find(|u| &u.id == id)
            .ok_or_else(|| Error::Data(format!("utterance {id} not found in {}", data.display())))?,
        None => utterances
            .first()
            .ok_or_else(|| Error::Data(format!("{} is empty", data.display())))?,
    };
    write_snapshot(
        out,
        &serde_json::json!({
            "checkpoint": ckpt,
            "data": data,
            "utterance": utt.id,
        }),
    )?;
    let records = eval::routing_report(&model, utt)?;
    let jsonl_path = out.join(format!("routing_{}.jsonl", utt.id));
    eval::write_routing_report(&records, &jsonl_path)?;
    let table = eval::render_routing_table(&records);
    let table_path = out.join(format!("routing_{}.txt", utt.id));
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");
    println!("wrote {} and {}", jsonl_path.display(), table_path.display());
    Ok(())
}
