//! Post-hoc evaluation: pair similarity statistics, Pearson correlation,
//! PCA projection and embedding export.

mod pca;

pub use pca::{pca_project, pca_project_seeded, PcaResult, PCA_MAX_ITERS, PCA_TOLERANCE};

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairDataset;
use crate::encoder::{encode_sentences, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::cosine_similarity;
use crate::text::Vocab;

pub const HIST_BINS: usize = 32;

/// Sample Pearson correlation (two-pass), clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    // sqrt of the product keeps r exactly ±1 for identical inputs
    let prod = sxx * syy;
    let denom = if prod.is_normal() { prod.sqrt() } else { sxx.sqrt() * syy.sqrt() };
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

/// Counts of values in 32 left-closed bins over `[-1, 1]`; 1.0 falls in the
/// last bin. Bin `i` covers `[-1 + i/16, -1 + (i+1)/16)`.
pub fn histogram(values: &[f64]) -> Vec<usize> {
    let mut bins = vec![0; HIST_BINS];
    for &v in values {
        let pos = ((v + 1.0) / 2.0 * HIST_BINS as f64).floor();
        let idx = (pos.max(0.0) as usize).min(HIST_BINS - 1);
        bins[idx] += 1;
    }
    bins
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_same: usize,
    pub n_random: usize,
    pub mean_same: f64,
    pub mean_random: f64,
    pub margin: f64,
    pub hist_same: Vec<usize>,
    pub hist_random: Vec<usize>,
}

impl SimilarityReport {
    pub fn from_similarities(same: &[f64], random: &[f64]) -> Result<Self> {
        if same.is_empty() || random.is_empty() {
            return Err(Error::EmptyInput("similarity groups must be non-empty".into()));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mean_same, mean_random) = (mean(same), mean(random));
        Ok(SimilarityReport {
            n_same: same.len(),
            n_random: random.len(),
            mean_same,
            mean_random,
            margin: mean_same - mean_random,
            hist_same: histogram(same),
            hist_random: histogram(random),
        })
    }
}

/// Cosine similarity of each pair's two sides under `params`.
pub fn pair_similarities(params: &EncoderParams, vocab: &Vocab, pairs: &PairDataset) -> Result<Vec<f64>> {
    let a = encode_sentences(params, vocab, &pairs.side_a())?;
    let b = encode_sentences(params, vocab, &pairs.side_b())?;
    a.iter().zip(&b).map(|(u, v)| cosine_similarity(u, v)).collect()
}

/// Mean similarity of same-source pairs versus random pairs.
pub fn similarity_report(
    params: &EncoderParams,
    vocab: &Vocab,
    same_pairs: &PairDataset,
    random_pairs: &PairDataset,
) -> Result<SimilarityReport> {
    let same = pair_similarities(params, vocab, same_pairs)?;
    let random = pair_similarities(params, vocab, random_pairs)?;
    SimilarityReport::from_similarities(&same, &random)
}

/// Embeds every non-empty line of `input` and writes
/// `index,v0,...,v{d-1}` CSV rows to `output`. Returns the rows written.
pub fn embed_file(params: &EncoderParams, vocab: &Vocab, input: &Path, output: &Path) -> Result<usize> {
    let text = fs::read_to_string(input)
        .map_err(|e| Error::io(format!("reading {}", input.display()), e))?;
    let mut skipped = 0usize;
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| {
            let keep = !l.trim().is_empty();
            skipped += usize::from(!keep);
            keep
        })
        .collect();
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} empty lines", input.display());
    }
    let rows = if lines.is_empty() {
        Vec::new()
    } else {
        encode_sentences(params, vocab, &lines)?
    };
    write_embedding_csv(&rows, params.config().d_model, output)?;
    Ok(rows.len())
}

pub fn write_embedding_csv(rows: &[Vec<f64>], dim: usize, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header: Vec<String> = std::iter::once("index".to_owned())
        .chain((0..dim).map(|i| format!("v{i}")))
        .collect();
    writeln!(out, "{}", header.join(",")).expect("write to Vec");
    for (i, row) in rows.iter().enumerate() {
        write!(out, "{i}").expect("write to Vec");
        for v in row {
            write!(out, ",{v}").expect("write to Vec");
        }
        writeln!(out).expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a CSV written by [`write_embedding_csv`]; the index column is dropped.
pub fn read_embedding_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            line.split(',')
                .skip(1)
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidConfig(format!("{}: row {n}: bad value `{f}`", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}
