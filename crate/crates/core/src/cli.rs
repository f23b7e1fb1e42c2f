//! Command-line front end.
//!
//! Every subcommand resolves its configuration in three layers: built-in
//! defaults (or a preset), then the `--config` JSON file, then `--set`
//! overrides. Unknown keys are rejected at any layer. Exit codes: 0 on
//! success, 1 on usage errors, 2 on runtime failures.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{load_pairs_tsv, make_eval_pairings, random_pairs, write_synth_corpora, PairKind, SynthConfig};
use crate::encoder::{load_checkpoint, EncoderParams};
use crate::evalkit::{embed_file, pca_project_seeded, read_embedding_csv, similarity_report, SimilarityReport};
use crate::regimen::{prepare, run_regimen, RegimenConfig, RegimenData, VOCAB_FILE};
use crate::seed::derive;
use crate::text::{Casing, Vocab};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "aligntune", version, about = "Two-stage contrastive sentence-embedding training")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file layered over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; every component seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted override applied after the config file, e.g. `stage1.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic translation, entailment and eval corpora.
    Synth(Common),
    /// Build the vocabulary a `train` run with the same config would use.
    BuildVocab(RegimenArgs),
    /// Run the two-stage regimen.
    Train(RegimenArgs),
    /// Same-vs-random similarity report and/or Pearson validation.
    Eval(Common),
    /// Write unit-norm embeddings of a one-sentence-per-line file.
    Embed(Common),
    /// Project an embedding CSV onto its top principal components.
    Pca(Common),
}

#[derive(Debug, Clone, Args)]
pub struct RegimenArgs {
    /// Base settings: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub casing: Casing,
    /// Same-source caption pairs; random pairs are drawn from the same file.
    pub caption_pairs: Option<PathBuf>,
    /// Entailment TSV from which labeled pairings are drawn.
    pub labeled_source: Option<PathBuf>,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: None,
            vocab: None,
            casing: Casing::Lower,
            caption_pairs: None,
            labeled_source: None,
            n_pos: 1000,
            n_neg: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub similarity: Option<SimilarityReport>,
    pub pearson: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub casing: Casing,
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    /// Embedding CSV as written by `embed`.
    pub input: Option<PathBuf>,
    pub k: usize,
    pub seed: u64,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig {
            input: None,
            k: 2,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c = value` in `root`, creating objects along the way. The
/// value is read as JSON when it parses, else as a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(usage(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    for part in key.split('.') {
        if !node.is_object() {
            return Err(usage(format!("override `{key}`: `{part}` is not inside an object")));
        }
        node = node
            .as_object_mut()
            .expect("checked above")
            .entry(part)
            .or_insert_with(|| Value::Object(Map::new()));
    }
    *node = value;
    Ok(())
}

/// Layers `--config` and `--set` over `base` and deserializes the result.
pub fn resolve_config<T: Serialize + DeserializeOwned>(base: &T, common: &Common) -> CliResult<T> {
    let mut value = serde_json::to_value(base).map_err(|e| CliError::Runtime(e.into()))?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let layer: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("{} is not valid JSON: {e}", path.display())))?;
        if !layer.is_object() {
            return Err(usage(format!("{} must hold a JSON object", path.display())));
        }
        merge(&mut value, layer);
    }
    for assignment in &common.set {
        apply_override(&mut value, assignment)?;
    }
    serde_json::from_value(value).map_err(|e| {
        let schema = serde_json::to_string_pretty(base).unwrap_or_default();
        usage(format!("invalid configuration: {e}\naccepted keys and defaults:\n{schema}"))
    })
}

fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> CliResult<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| usage(format!("`{name}` must be set (config file or --set {name}=PATH)")))
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Runtime)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.into()))?;
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Runtime)
}

fn load_model(checkpoint: &Path, vocab: &Path, casing: Casing) -> CliResult<(EncoderParams, Vocab)> {
    let params = load_checkpoint(checkpoint)?;
    let vocab = Vocab::load(vocab, casing)?;
    if vocab.len() != params.config().vocab_size {
        return Err(CliError::Runtime(anyhow!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            params.config().vocab_size
        )));
    }
    Ok((params, vocab))
}

fn regimen_config(args: &RegimenArgs) -> CliResult<RegimenConfig> {
    let base = RegimenConfig::preset(&args.preset).map_err(|e| usage(e.to_string()))?;
    let mut cfg = resolve_config(&base, &args.common)?;
    if let Some(seed) = args.common.seed {
        cfg.seed = Some(seed);
    }
    cfg.output_dir = args.common.out.clone();
    let cfg = cfg.resolved();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_synth(common: &Common) -> CliResult<()> {
    let mut cfg = resolve_config(&SynthConfig::default(), common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_out(&common.out)?;
    let manifest = write_synth_corpora(&cfg, &common.out)?;
    println!(
        "wrote {} translation, {} entailment, {} eval pairs to {}",
        manifest.counts.translation,
        manifest.counts.entailment,
        manifest.counts.eval,
        common.out.display()
    );
    Ok(())
}

fn cmd_build_vocab(args: &RegimenArgs) -> CliResult<()> {
    let cfg = regimen_config(args)?;
    let data = RegimenData::load(&cfg)?;
    let prepared = prepare(&cfg, &data)?;
    create_out(&args.common.out)?;
    let path = args.common.out.join(VOCAB_FILE);
    prepared.vocab.save(&path)?;
    println!("{} entries written to {}", prepared.vocab.len(), path.display());
    Ok(())
}

fn cmd_train(args: &RegimenArgs) -> CliResult<()> {
    let cfg = regimen_config(args)?;
    let data = RegimenData::load(&cfg)?;
    let run = run_regimen(&cfg, &data)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_owned(), |x| format!("{x:.4}"));
    for stage in [&run.report.stage1, &run.report.stage2].into_iter().flatten() {
        if stage.skipped {
            println!("{}: skipped", stage.metric);
        } else {
            println!(
                "{}: final {} best {} after {} steps",
                stage.metric,
                fmt(stage.final_metric),
                fmt(stage.best_metric),
                stage.n_steps
            );
        }
    }
    println!("report: {}", cfg.output_dir.join(crate::regimen::REPORT_FILE).display());
    Ok(())
}

fn cmd_eval(common: &Common) -> CliResult<()> {
    let mut cfg = resolve_config(&EvalConfig::default(), common)?;
    if let Some(seed) = common.seed {
        cfg.seed = derive(seed, "eval");
    }
    let checkpoint = require(&cfg.checkpoint, "checkpoint")?;
    let vocab_path = require(&cfg.vocab, "vocab")?;
    if cfg.caption_pairs.is_none() && cfg.labeled_source.is_none() {
        return Err(usage("set `caption_pairs` and/or `labeled_source`"));
    }
    let (params, vocab) = load_model(checkpoint, vocab_path, cfg.casing)?;

    let similarity = match &cfg.caption_pairs {
        Some(path) => {
            let same = load_pairs_tsv(path, PairKind::Caption)?;
            let random = random_pairs(&same, same.len(), derive(cfg.seed, "random_pairs"))?;
            Some(similarity_report(&params, &vocab, &same, &random)?)
        }
        None => None,
    };
    let pearson = match &cfg.labeled_source {
        Some(path) => {
            let ds = load_pairs_tsv(path, PairKind::Entailment)?;
            let pairings = make_eval_pairings(&ds, cfg.n_pos, cfg.n_neg, derive(cfg.seed, "pairings"))?;
            Some(crate::regimen::validate_pearson(&params, &vocab, &pairings)?)
        }
        None => None,
    };
    create_out(&common.out)?;
    if let Some(s) = &similarity {
        println!("mean same {:.4}, mean random {:.4}, margin {:.4}", s.mean_same, s.mean_random, s.margin);
    }
    if let Some(r) = pearson {
        println!("pearson {r:.4}");
    }
    write_json(
        &EvalReport {
            config: cfg,
            similarity,
            pearson,
        },
        &common.out.join("eval.json"),
    )
}

fn cmd_embed(common: &Common) -> CliResult<()> {
    let cfg = resolve_config(&EmbedConfig::default(), common)?;
    let input = require(&cfg.input, "input")?;
    let (params, vocab) = load_model(
        require(&cfg.checkpoint, "checkpoint")?,
        require(&cfg.vocab, "vocab")?,
        cfg.casing,
    )?;
    create_out(&common.out)?;
    let path = common.out.join("embeddings.csv");
    let n = embed_file(&params, &vocab, input, &path)?;
    println!("{n} embeddings written to {}", path.display());
    Ok(())
}

fn cmd_pca(common: &Common) -> CliResult<()> {
    let mut cfg = resolve_config(&PcaConfig::default(), common)?;
    if let Some(seed) = common.seed {
        cfg.seed = derive(seed, "pca");
    }
    let rows = read_embedding_csv(require(&cfg.input, "input")?)?;
    let result = pca_project_seeded(&rows, cfg.k, cfg.seed)?;
    create_out(&common.out)?;
    result.save_json(&common.out.join("pca.json"))?;
    result.save_coordinates_csv(&common.out.join("pca_coordinates.csv"))?;
    println!(
        "explained variance ratio {:?}",
        result.explained_variance_ratio.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(c) => cmd_eval(c),
        Command::Embed(c) => cmd_embed(c),
        Command::Pca(c) => cmd_pca(c),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("usage error: {msg}"),
                CliError::Runtime(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}
