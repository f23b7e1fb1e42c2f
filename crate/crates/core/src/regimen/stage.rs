use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::trace::MetricTrace;
use super::validate::{validate_pearson, validate_translation};
use crate::data::{BatchIter, LabeledPairings, PairDataset, PairKind};
use crate::encoder::{forward, save_checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::{mnrl_loss, AdamConfig, AdamState, MnrlConfig};
use crate::tensor::Graph;
use crate::text::{tokenize_batch, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub name: String,
    pub kind: PairKind,
    /// TSV source; unused when datasets are supplied in memory.
    pub dataset: Option<PathBuf>,
    pub batch_size: usize,
    pub n_batches: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub warmup_steps: u64,
    pub mnrl: MnrlConfig,
    pub eval_every: usize,
    /// Pairs held out of the training file for validation.
    pub n_holdout: usize,
    /// Labeled pairings drawn from the holdout (entailment stage only).
    pub n_pos: usize,
    pub n_neg: usize,
    /// Also train on swapped (B, A) pairs.
    pub bidirectional: bool,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::desk_translation()
    }
}

impl StageConfig {
    pub fn paper_translation() -> Self {
        StageConfig {
            name: "stage1".into(),
            kind: PairKind::Translation,
            dataset: None,
            batch_size: 32,
            n_batches: 120_000,
            lr: 1e-5,
            weight_decay: 0.005,
            decoupled_weight_decay: true,
            warmup_steps: 0,
            mnrl: MnrlConfig::default(),
            eval_every: 500,
            n_holdout: 2048,
            n_pos: 0,
            n_neg: 0,
            bidirectional: false,
            seed: 0,
        }
    }

    pub fn paper_entailment() -> Self {
        StageConfig {
            name: "stage2".into(),
            kind: PairKind::Entailment,
            batch_size: 16,
            n_batches: 16_000,
            lr: 1e-4,
            n_holdout: 2000,
            n_pos: 1000,
            n_neg: 1000,
            ..Self::paper_translation()
        }
    }

    pub fn desk_translation() -> Self {
        StageConfig {
            n_batches: 2000,
            lr: 1e-3,
            eval_every: 250,
            n_holdout: 256,
            ..Self::paper_translation()
        }
    }

    pub fn desk_entailment() -> Self {
        StageConfig {
            n_batches: 1000,
            lr: 1e-3,
            eval_every: 250,
            n_holdout: 1000,
            ..Self::paper_entailment()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("stage {}: {m}", self.name)));
        if self.n_batches == 0 {
            return bad("n_batches must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("invalid learning rate {}", self.lr));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("invalid weight decay {}", self.weight_decay));
        }
        if self.name.is_empty() || self.name.contains([',', '/', '\\']) {
            return bad("name must be non-empty without ',', '/' or '\\'".into());
        }
        self.mnrl.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamConfig::default()
        }
    }
}

/// Held-out data scored during a stage.
#[derive(Clone, Debug)]
pub enum Validation {
    /// Translation stage: retrieval in both directions plus mean cosine.
    Translation(PairDataset),
    /// Entailment stage: Pearson r of cosines against 0/1 labels.
    Labeled(LabeledPairings),
}

/// Metric used to pick the best checkpoint.
pub fn headline_metric(val: &Validation) -> &'static str {
    match val {
        Validation::Translation(_) => "retrieval_acc",
        Validation::Labeled(_) => "pearson",
    }
}

/// Scores `params`; returns the headline value (if defined) and every
/// named metric for the trace.
pub fn evaluate(params: &EncoderParams, vocab: &Vocab, val: &Validation) -> Result<(Option<f64>, Vec<(&'static str, f64)>)> {
    match val {
        Validation::Translation(ds) => {
            let m = validate_translation(params, vocab, ds)?;
            Ok((
                Some(m.mean_retrieval()),
                vec![
                    ("retrieval_acc", m.mean_retrieval()),
                    ("retrieval_acc_ab", m.retrieval_acc_ab),
                    ("retrieval_acc_ba", m.retrieval_acc_ba),
                    ("mean_cos", m.mean_cos),
                    ("mean_cos_random", m.mean_cos_random),
                ],
            ))
        }
        Validation::Labeled(p) => match validate_pearson(params, vocab, p) {
            Ok(r) => Ok((Some(r), vec![("pearson", r)])),
            Err(Error::UndefinedCorrelation(msg)) => {
                log::warn!("pearson undefined: {msg}");
                Ok((None, vec![("pearson_undefined", 0.0)]))
            }
            Err(e) => Err(e),
        },
    }
}

#[derive(Clone, Debug, Default)]
pub struct StageCheckpoints {
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
}

#[derive(Debug)]
pub struct StageOutcome {
    pub params: EncoderParams,
    pub optimizer: AdamState,
    pub trace: MetricTrace,
    pub metric: &'static str,
    pub final_metric: Option<f64>,
    pub best_metric: Option<f64>,
    pub best_batch: Option<usize>,
    pub n_steps: usize,
    pub wall_seconds: f64,
    pub checkpoints: StageCheckpoints,
}

/// Options outside the stage hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct StageIo<'a> {
    /// Directory for `{name}_best.btn` / `{name}_final.btn`; no files when `None`.
    pub checkpoint_dir: Option<&'a Path>,
    /// Carry-over optimizer state; a fresh one is created when `None`.
    pub optimizer: Option<AdamState>,
    /// Record elapsed seconds; all timing fields are 0 otherwise.
    pub record_timing: bool,
}

fn batch_loss(
    params: &EncoderParams,
    vocab: &Vocab,
    cfg: &StageConfig,
    train: &PairDataset,
    indices: &[usize],
) -> Result<(f64, IndexMap<String, Vec<f64>>)> {
    let enc = params.config();
    let a: Vec<&str> = indices.iter().map(|&i| train.pairs()[i].0.as_str()).collect();
    let b: Vec<&str> = indices.iter().map(|&i| train.pairs()[i].1.as_str()).collect();
    let ta = tokenize_batch(vocab, &a, enc.max_len)?;
    let tb = tokenize_batch(vocab, &b, enc.max_len)?;

    let mut g = Graph::with_seed(cfg.seed);
    let nodes = params.attach(&mut g, true);
    let u = forward(&mut g, &nodes, enc, &ta, enc.pooling)?;
    let v = forward(&mut g, &nodes, enc, &tb, enc.pooling)?;
    let loss = mnrl_loss(&mut g, u, v, &cfg.mnrl)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("stage {} loss {value}", cfg.name)));
    }
    let mut grads = g.backward(loss)?;
    let map = nodes
        .iter()
        .filter_map(|(name, id)| grads.take(id).map(|gr| (name.to_owned(), gr)))
        .collect();
    Ok((value, map))
}

/// Trains `params` on `train` with MNRL and Adam for `cfg.n_batches`
/// batches, validating at batch 0, every `eval_every` batches and at the end.
pub fn run_stage(
    params: EncoderParams,
    vocab: &Vocab,
    cfg: &StageConfig,
    train: &PairDataset,
    val: &Validation,
    io: StageIo<'_>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let record_timing = io.record_timing;
    let elapsed = move || if record_timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let mut params = params;
    let mut optimizer = match io.optimizer {
        Some(mut state) => {
            state.set_config(cfg.adam());
            state
        }
        None => AdamState::new(cfg.adam()),
    };
    let mut trace = MetricTrace::new();
    let metric = headline_metric(val);
    let mut best: Option<(usize, f64)> = None;
    let mut checkpoints = StageCheckpoints::default();
    let best_path = io.checkpoint_dir.map(|d| d.join(format!("{}_best.btn", cfg.name)));

    let mut last_headline = None;
    let mut validate_at = |step: usize,
                           params: &EncoderParams,
                           trace: &mut MetricTrace,
                           checkpoints: &mut StageCheckpoints|
     -> Result<()> {
        let (headline, metrics) = evaluate(params, vocab, val)?;
        let secs = elapsed();
        for (name, value) in metrics {
            trace.push(&cfg.name, step, name, value, secs)?;
        }
        last_headline = headline;
        if let Some(h) = headline {
            if best.map_or(true, |(_, b)| h > b) {
                best = Some((step, h));
                if let Some(path) = &best_path {
                    save_checkpoint(params, path)?;
                    checkpoints.best = Some(path.clone());
                }
            }
        }
        log::info!("{} batch {step}: {metric} = {:?}", cfg.name, headline);
        Ok(())
    };

    validate_at(0, &params, &mut trace, &mut checkpoints)?;
    let mut steps = 0;
    for indices in BatchIter::new(train, cfg.batch_size, cfg.n_batches, cfg.seed)? {
        let (loss, grads) = batch_loss(&params, vocab, cfg, train, &indices)?;
        optimizer.step(params.registry_mut(), &grads)?;
        steps += 1;
        trace.push(&cfg.name, steps, "loss", loss, elapsed())?;
        if steps % cfg.eval_every == 0 || steps == cfg.n_batches {
            validate_at(steps, &params, &mut trace, &mut checkpoints)?;
        }
    }
    if let Some(dir) = io.checkpoint_dir {
        let path = dir.join(format!("{}_final.btn", cfg.name));
        save_checkpoint(&params, &path)?;
        checkpoints.last = Some(path);
    }
    Ok(StageOutcome {
        params,
        optimizer,
        trace,
        metric,
        final_metric: last_headline,
        best_metric: best.map(|(_, v)| v),
        best_batch: best.map(|(s, _)| s),
        n_steps: steps,
        wall_seconds: elapsed(),
        checkpoints,
    })
}
