//! Two-stage training: translation alignment, then target-language
//! entailment fine-tuning, with validation traces, checkpoints and a JSON
//! run report.

mod stage;
mod trace;
mod validate;

pub use stage::{
    evaluate, headline_metric, run_stage, StageCheckpoints, StageConfig, StageIo, StageOutcome, Validation,
};
pub use trace::{MetricTrace, TraceRecord};
pub use validate::{pairing_similarities, validate_pearson, validate_translation, TranslationMetrics};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_pairs_tsv, make_eval_pairings, random_pairs, split_validation, LabeledPairings, PairDataset, PairKind,
};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::evalkit::{similarity_report, SimilarityReport};
use crate::seed::derive;
use crate::text::{Casing, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Existing vocabulary file; built from the training splits when `None`.
    pub path: Option<PathBuf>,
    pub min_freq: usize,
    pub casing: Casing,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            path: None,
            min_freq: 1,
            casing: Casing::Lower,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimenConfig {
    pub encoder: EncoderConfig,
    pub vocab: VocabConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Ablation: start stage 2 from freshly initialized parameters.
    pub skip_stage1: bool,
    /// Carry Adam moments from stage 1 into stage 2 instead of resetting.
    pub reuse_optimizer_state: bool,
    /// Caption-style pairs for a post-training same-vs-random report.
    pub eval_dataset: Option<PathBuf>,
    /// Random pairings per same-source pair in that report.
    pub eval_random_seed: u64,
    pub output_dir: PathBuf,
    /// Global seed; when set, every component seed is derived from it.
    pub seed: Option<u64>,
    /// Wall-clock columns in the trace and report; zero when off, which
    /// makes reruns byte-identical.
    pub record_timing: bool,
}

impl Default for RegimenConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RegimenConfig {
    /// Minutes-scale settings exercised by the test suite.
    pub fn desk() -> Self {
        RegimenConfig {
            encoder: EncoderConfig::desk(0),
            vocab: VocabConfig::default(),
            stage1: StageConfig::desk_translation(),
            stage2: StageConfig::desk_entailment(),
            skip_stage1: false,
            reuse_optimizer_state: false,
            eval_dataset: None,
            eval_random_seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            seed: None,
            record_timing: true,
        }
    }

    /// Full-scale schedule: 120,000 batches of 32 at lr 1e-5, then
    /// 16,000 batches of 16 at lr 1e-4, weight decay 0.005 in both.
    pub fn paper() -> Self {
        RegimenConfig {
            encoder: EncoderConfig::paper(0),
            stage1: StageConfig::paper_translation(),
            stage2: StageConfig::paper_entailment(),
            output_dir: PathBuf::from("runs/paper"),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}` (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1.kind != PairKind::Translation {
            return Err(Error::InvalidConfig("stage1 must be a translation stage".into()));
        }
        if self.stage2.kind != PairKind::Entailment {
            return Err(Error::InvalidConfig("stage2 must be an entailment stage".into()));
        }
        if self.stage1.name == self.stage2.name {
            return Err(Error::InvalidConfig("stage names must differ".into()));
        }
        if self.stage2.n_pos == 0 || self.stage2.n_neg == 0 {
            return Err(Error::InvalidConfig("stage2 needs positive and negative pairings".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// Copy with component seeds derived from `seed`, if set.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        if let Some(seed) = self.seed {
            cfg.apply_global_seed(seed);
        }
        cfg
    }

    /// Fans a single global seed out to every component.
    pub fn apply_global_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.encoder.seed = derive(seed, "encoder");
        self.stage1.seed = derive(seed, "stage1");
        self.stage2.seed = derive(seed, "stage2");
        self.eval_random_seed = derive(seed, "eval");
    }
}

/// Training corpora for both stages.
#[derive(Clone, Debug)]
pub struct RegimenData {
    pub translation: PairDataset,
    pub entailment: PairDataset,
    pub eval: Option<PairDataset>,
}

impl RegimenData {
    pub fn load(cfg: &RegimenConfig) -> Result<Self> {
        let path = |s: &StageConfig| {
            s.dataset
                .clone()
                .ok_or_else(|| Error::InvalidConfig(format!("{}.dataset is not set", s.name)))
        };
        Ok(RegimenData {
            translation: load_pairs_tsv(&path(&cfg.stage1)?, PairKind::Translation)?,
            entailment: load_pairs_tsv(&path(&cfg.stage2)?, PairKind::Entailment)?,
            eval: cfg
                .eval_dataset
                .as_deref()
                .map(|p| load_pairs_tsv(p, PairKind::Caption))
                .transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub skipped: bool,
    pub metric: String,
    pub final_metric: Option<f64>,
    pub best_metric: Option<f64>,
    pub best_batch: Option<usize>,
    pub n_steps: usize,
    pub wall_seconds: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

impl StageReport {
    fn skipped(metric: &str) -> Self {
        StageReport {
            skipped: true,
            metric: metric.to_owned(),
            final_metric: None,
            best_metric: None,
            best_batch: None,
            n_steps: 0,
            wall_seconds: 0.0,
            best_checkpoint: None,
            final_checkpoint: None,
        }
    }

    fn from_outcome(o: &StageOutcome) -> Self {
        StageReport {
            skipped: false,
            metric: o.metric.to_owned(),
            final_metric: o.final_metric,
            best_metric: o.best_metric,
            best_batch: o.best_batch,
            n_steps: o.n_steps,
            wall_seconds: o.wall_seconds,
            best_checkpoint: o.checkpoints.best.clone(),
            final_checkpoint: o.checkpoints.last.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: String,
    pub error: Option<String>,
    pub config: RegimenConfig,
    pub vocab_size: usize,
    pub stage1: Option<StageReport>,
    pub stage2: Option<StageReport>,
    pub evaluation: Option<SimilarityReport>,
    pub final_checkpoint: Option<PathBuf>,
    pub trace: PathBuf,
}

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FAILURE_MARKER: &str = "FAILED";

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub params: EncoderParams,
    pub vocab: Vocab,
    pub trace: MetricTrace,
}

fn build_vocab(cfg: &RegimenConfig, parts: &[&PairDataset]) -> Result<Vocab> {
    if let Some(path) = &cfg.vocab.path {
        return Vocab::load(path, cfg.vocab.casing);
    }
    let corpus = parts
        .iter()
        .flat_map(|d| d.pairs().iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]));
    Vocab::build(corpus, cfg.vocab.min_freq, cfg.vocab.casing)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Training splits, validation data and vocabulary shared by both stages.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train1: PairDataset,
    pub val1: PairDataset,
    pub train2: PairDataset,
    pub pairings: LabeledPairings,
    pub vocab: Vocab,
}

/// Splits off both holdouts, draws the labeled pairings and builds the
/// vocabulary. Expects a resolved config.
pub fn prepare(cfg: &RegimenConfig, data: &RegimenData) -> Result<Prepared> {
    let split_seed = |s: &StageConfig| derive(s.seed, "holdout");
    let (train1, val1) = split_validation(&data.translation, cfg.stage1.n_holdout, split_seed(&cfg.stage1))?;
    let (train2, held2) = split_validation(&data.entailment, cfg.stage2.n_holdout, split_seed(&cfg.stage2))?;
    let pairings = make_eval_pairings(&held2, cfg.stage2.n_pos, cfg.stage2.n_neg, derive(cfg.stage2.seed, "pairings"))?;
    // The vocabulary depends on both stages' data even when stage 1 is
    // skipped, so ablation runs share ids and initial weights.
    let vocab = build_vocab(cfg, &[&train1, &train2])?;
    Ok(Prepared {
        train1,
        val1,
        train2,
        pairings,
        vocab,
    })
}

struct Partial {
    vocab_size: usize,
    stage1: Option<StageReport>,
    stage2: Option<StageReport>,
    trace: MetricTrace,
}

/// Runs stage 1 (unless skipped) and stage 2 on one parameter registry and
/// writes `vocab.txt`, stage checkpoints, `trace.csv` and `report.json`
/// into `cfg.output_dir`. On failure the partial report carries
/// `status: "failed"` and a `FAILED` marker file is written.
pub fn run_regimen(cfg: &RegimenConfig, data: &RegimenData) -> Result<RunArtifacts> {
    let cfg = &cfg.resolved();
    cfg.validate()?;
    let out = cfg.output_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let _ = fs::remove_file(out.join(FAILURE_MARKER));

    let mut partial = Partial {
        vocab_size: 0,
        stage1: None,
        stage2: None,
        trace: MetricTrace::new(),
    };
    match run_inner(cfg, data, &mut partial) {
        Ok(artifacts) => Ok(artifacts),
        Err(e) => {
            partial.trace.save_csv(&out.join(TRACE_FILE)).ok();
            let report = RunReport {
                status: "failed".into(),
                error: Some(e.to_string()),
                config: cfg.clone(),
                vocab_size: partial.vocab_size,
                stage1: partial.stage1,
                stage2: partial.stage2,
                evaluation: None,
                final_checkpoint: None,
                trace: out.join(TRACE_FILE),
            };
            write_json(&report, &out.join(REPORT_FILE)).ok();
            fs::write(out.join(FAILURE_MARKER), e.to_string()).ok();
            Err(e)
        }
    }
}

fn run_inner(cfg: &RegimenConfig, data: &RegimenData, partial: &mut Partial) -> Result<RunArtifacts> {
    let out = cfg.output_dir.as_path();
    let Prepared {
        train1,
        val1,
        train2,
        pairings,
        vocab,
    } = prepare(cfg, data)?;
    vocab.save(&out.join(VOCAB_FILE))?;
    partial.vocab_size = vocab.len();
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.vocab_size = vocab.len();
    let init = EncoderParams::init(&enc_cfg)?;

    let (params, optimizer) = if cfg.skip_stage1 {
        partial.stage1 = Some(StageReport::skipped(headline_metric(&Validation::Translation(val1))));
        (init, None)
    } else {
        let train1 = if cfg.stage1.bidirectional { train1.with_reversed() } else { train1 };
        let outcome = run_stage(
            init,
            &vocab,
            &cfg.stage1,
            &train1,
            &Validation::Translation(val1),
            StageIo {
                checkpoint_dir: Some(out),
                optimizer: None,
                record_timing: cfg.record_timing,
            },
        )?;
        partial.stage1 = Some(StageReport::from_outcome(&outcome));
        partial.trace.extend(outcome.trace);
        let carry = cfg.reuse_optimizer_state.then_some(outcome.optimizer);
        (outcome.params, carry)
    };

    let train2 = if cfg.stage2.bidirectional { train2.with_reversed() } else { train2 };
    let outcome = run_stage(
        params,
        &vocab,
        &cfg.stage2,
        &train2,
        &Validation::Labeled(pairings),
        StageIo {
            checkpoint_dir: Some(out),
            optimizer,
            record_timing: cfg.record_timing,
        },
    )?;
    partial.stage2 = Some(StageReport::from_outcome(&outcome));
    partial.trace.extend(outcome.trace);

    let evaluation = match &data.eval {
        Some(same) => {
            let random = random_pairs(same, same.len(), cfg.eval_random_seed)?;
            Some(similarity_report(&outcome.params, &vocab, same, &random)?)
        }
        None => None,
    };

    let trace_path = out.join(TRACE_FILE);
    partial.trace.save_csv(&trace_path)?;
    let report = RunReport {
        status: "ok".into(),
        error: None,
        config: RegimenConfig {
            encoder: enc_cfg,
            ..cfg.clone()
        },
        vocab_size: vocab.len(),
        stage1: partial.stage1.take(),
        stage2: partial.stage2.take(),
        evaluation,
        final_checkpoint: outcome.checkpoints.last.clone(),
        trace: trace_path,
    };
    write_json(&report, &out.join(REPORT_FILE))?;
    Ok(RunArtifacts {
        report,
        params: outcome.params,
        vocab,
        trace: std::mem::take(&mut partial.trace),
    })
}
