//! Sentence-pair corpora: TSV ingestion, validation splits, labeled
//! evaluation pairings, deterministic batching and a synthetic bilingual
//! generator.

mod batch;
mod synth;

pub use batch::BatchIter;
pub use synth::{synth_bilingual, write_synth_corpora, SynthConfig, SynthCorpora, SynthManifest, Translator};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default share of malformed lines tolerated by [`load_pairs_tsv`].
pub const DEFAULT_MAX_MALFORMED: f64 = 0.01;
pub const ENTAILMENT_LABEL: &str = "entailment";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Translation,
    Entailment,
    Caption,
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairKind::Translation => "translation",
            PairKind::Entailment => "entailment",
            PairKind::Caption => "caption",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pairs: Vec<(String, String)>,
    kind: PairKind,
    source: String,
}

impl PairDataset {
    pub fn new(pairs: Vec<(String, String)>, kind: PairKind, source: impl Into<String>) -> Result<Self> {
        if let Some(i) = pairs
            .iter()
            .position(|(a, b)| a.trim().is_empty() || b.trim().is_empty())
        {
            return Err(Error::EmptyInput(format!("pair {i} has an empty sentence")));
        }
        Ok(PairDataset {
            pairs,
            kind,
            source: source.into(),
        })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn kind(&self) -> PairKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn side_a(&self) -> Vec<&str> {
        self.pairs.iter().map(|(a, _)| a.as_str()).collect()
    }

    pub fn side_b(&self) -> Vec<&str> {
        self.pairs.iter().map(|(_, b)| b.as_str()).collect()
    }

    fn subset(&self, indices: &[usize], tag: &str) -> PairDataset {
        PairDataset {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            kind: self.kind,
            source: format!("{}#{tag}", self.source),
        }
    }

    /// Appends every pair again with its sides swapped.
    pub fn with_reversed(&self) -> PairDataset {
        let mut pairs = self.pairs.clone();
        pairs.extend(self.pairs.iter().map(|(a, b)| (b.clone(), a.clone())));
        PairDataset {
            pairs,
            kind: self.kind,
            source: format!("{}#bidirectional", self.source),
        }
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (a, b) in &self.pairs {
            writeln!(out, "{a}\t{b}").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Reads `A<TAB>B[<TAB>label]` lines. For entailment sources carrying a
/// label column only `entailment` rows are kept.
pub fn load_pairs_tsv(path: &Path, kind: PairKind) -> Result<PairDataset> {
    load_pairs_tsv_with(path, kind, DEFAULT_MAX_MALFORMED)
}

pub fn load_pairs_tsv_with(path: &Path, kind: PairKind, max_malformed: f64) -> Result<PairDataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut pairs = Vec::new();
    let mut malformed = 0usize;
    let mut total = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        let (a, b, label) = match cols.as_slice() {
            [a, b] => (a.trim(), b.trim(), None),
            [a, b, l] => (a.trim(), b.trim(), Some(l.trim())),
            _ => {
                malformed += 1;
                continue;
            }
        };
        if a.is_empty() || b.is_empty() {
            malformed += 1;
            continue;
        }
        if kind == PairKind::Entailment && label.is_some_and(|l| l != ENTAILMENT_LABEL) {
            continue;
        }
        pairs.push((a.to_owned(), b.to_owned()));
    }
    if malformed > 0 {
        log::warn!("{}: {malformed} of {total} lines malformed", path.display());
    }
    if total > 0 && malformed as f64 > max_malformed * total as f64 {
        return Err(Error::TooManyMalformed {
            path: path.to_owned(),
            malformed,
            total,
            limit: max_malformed * 100.0,
        });
    }
    PairDataset::new(pairs, kind, path.display().to_string())
}

/// Holds out `n_holdout` pairs chosen uniformly without replacement. Both
/// halves keep the original relative order.
pub fn split_validation(ds: &PairDataset, n_holdout: usize, seed: u64) -> Result<(PairDataset, PairDataset)> {
    if n_holdout >= ds.len() && !(n_holdout == 0 && ds.is_empty()) {
        return Err(Error::InsufficientData(format!(
            "cannot hold out {n_holdout} of {} pairs",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; ds.len()];
    for i in index::sample(&mut rng, ds.len(), n_holdout) {
        held[i] = true;
    }
    let (val, train): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| held[i]);
    Ok((ds.subset(&train, "train"), ds.subset(&val, "val")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: String,
    pub b: String,
    pub label: f64,
}

/// Sentence pairs labeled 1.0 (true match) or 0.0 (random pairing).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPairings {
    items: Vec<LabeledPair>,
}

impl LabeledPairings {
    pub fn new(items: Vec<LabeledPair>) -> Result<Self> {
        if let Some(p) = items.iter().find(|p| p.label != 0.0 && p.label != 1.0) {
            return Err(Error::InvalidConfig(format!("label {} is not 0 or 1", p.label)));
        }
        Ok(LabeledPairings { items })
    }

    pub fn items(&self) -> &[LabeledPair] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(positives, negatives)`
    pub fn counts(&self) -> (usize, usize) {
        let pos = self.items.iter().filter(|p| p.label == 1.0).count();
        (pos, self.items.len() - pos)
    }

    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(|p| p.label).collect()
    }
}

/// Draws `j ≠ i` uniformly.
fn other_index(rng: &mut impl Rng, n: usize, i: usize) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// `n_pos` true pairs (distinct, uniformly chosen) labeled 1.0 followed by
/// `n_neg` pairings of A from pair `i` with B from pair `j ≠ i`, labeled 0.0.
pub fn make_eval_pairings(ds: &PairDataset, n_pos: usize, n_neg: usize, seed: u64) -> Result<LabeledPairings> {
    if ds.len() < n_pos || (n_neg > 0 && ds.len() < 2) {
        return Err(Error::InsufficientData(format!(
            "{} pairs cannot provide {n_pos} positives and {n_neg} negatives",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = index::sample(&mut rng, ds.len(), n_pos).into_vec();
    pos.sort_unstable();
    let mut items: Vec<LabeledPair> = pos
        .into_iter()
        .map(|i| LabeledPair {
            a: ds.pairs[i].0.clone(),
            b: ds.pairs[i].1.clone(),
            label: 1.0,
        })
        .collect();
    for _ in 0..n_neg {
        let i = rng.gen_range(0..ds.len());
        let j = other_index(&mut rng, ds.len(), i);
        items.push(LabeledPair {
            a: ds.pairs[i].0.clone(),
            b: ds.pairs[j].1.clone(),
            label: 0.0,
        });
    }
    LabeledPairings::new(items)
}

/// Pairs each A side with the B side of a different, randomly chosen pair.
pub fn random_pairs(ds: &PairDataset, n: usize, seed: u64) -> Result<PairDataset> {
    if ds.len() < 2 {
        return Err(Error::InsufficientData("random pairs need at least 2 pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| {
            let i = rng.gen_range(0..ds.len());
            let j = other_index(&mut rng, ds.len(), i);
            (ds.pairs[i].0.clone(), ds.pairs[j].1.clone())
        })
        .collect();
    PairDataset::new(pairs, ds.kind, format!("{}#random", ds.source))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(n: usize) -> PairDataset {
        let pairs = (0..n).map(|i| (format!("a{i}"), format!("b{i}"))).collect();
        PairDataset::new(pairs, PairKind::Translation, "mem").unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "t.tsv", "x y\tX Y\nb\tB\nc\tC\n");
        let d = load_pairs_tsv(&p, PairKind::Translation).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.pairs()[0], ("x y".into(), "X Y".into()));
        assert_eq!(d.pairs()[2].0, "c");
    }

    #[test]
    fn entailment_filter_keeps_only_entailment() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for i in 0..100 {
            for l in ["entailment", "contradiction", "neutral"] {
                body.push_str(&format!("p{i}\th{i}\t{l}\n"));
            }
        }
        let p = write(&dir, "nli.tsv", &body);
        let d = load_pairs_tsv(&p, PairKind::Entailment).unwrap();
        assert_eq!(d.len(), 100);
    }

    #[test]
    fn malformed_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let mut body: String = (0..48).map(|i| format!("a{i}\tb{i}\n")).collect();
        body.push_str("only one column\n");
        body.push_str("a\tb\tc\td\n");
        let p = write(&dir, "bad.tsv", &body);
        assert!(matches!(
            load_pairs_tsv(&p, PairKind::Translation),
            Err(Error::TooManyMalformed { malformed: 2, total: 50, .. })
        ));
        let d = load_pairs_tsv_with(&p, PairKind::Translation, 0.05).unwrap();
        assert_eq!(d.len(), 48);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_pairs_tsv(Path::new("/nonexistent/x.tsv"), PairKind::Caption),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = ds(10);
        let (t1, v1) = split_validation(&d, 2, 5).unwrap();
        let (t2, v2) = split_validation(&d, 2, 5).unwrap();
        assert_eq!((&t1, &v1), (&t2, &v2));
        assert_eq!(v1.len(), 2);
        assert!(v1.pairs().iter().all(|p| !t1.pairs().contains(p)));

        let (t0, v0) = split_validation(&d, 0, 5).unwrap();
        assert!(v0.is_empty());
        assert_eq!(t0.pairs(), d.pairs());

        let big = ds(5000);
        let (t, v) = split_validation(&big, 2048, 1).unwrap();
        assert_eq!(t.len(), 2952);
        assert_eq!(v.len(), 2048);
        let vs: std::collections::HashSet<_> = v.pairs().iter().collect();
        assert!(t.pairs().iter().all(|p| !vs.contains(p)));

        assert!(split_validation(&d, 10, 0).is_err());
    }

    #[test]
    fn split_preserves_relative_order() {
        let d = ds(50);
        let (t, v) = split_validation(&d, 20, 9).unwrap();
        let pos = |p: &(String, String)| d.pairs().iter().position(|q| q == p).unwrap();
        for half in [&t, &v] {
            let idx: Vec<_> = half.pairs().iter().map(pos).collect();
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn eval_pairings_counts_and_labels() {
        let d = ds(1500);
        let p = make_eval_pairings(&d, 1000, 1000, 3).unwrap();
        assert_eq!(p.len(), 2000);
        assert_eq!(p.counts(), (1000, 1000));
        assert_eq!(p, make_eval_pairings(&d, 1000, 1000, 3).unwrap());
        assert!(make_eval_pairings(&ds(5), 6, 0, 0).is_err());
        assert!(make_eval_pairings(&ds(1), 1, 1, 0).is_err());
    }

    #[test]
    fn negatives_never_pair_own_mate() {
        let d = ds(3);
        let p = make_eval_pairings(&d, 3, 500, 17).unwrap();
        for item in p.items().iter().filter(|i| i.label == 0.0) {
            assert_ne!(item.a[1..], item.b[1..]);
        }
        let r = random_pairs(&d, 200, 4).unwrap();
        assert!(r.pairs().iter().all(|(a, b)| a[1..] != b[1..]));
    }

    #[test]
    fn labels_must_be_binary() {
        let bad = vec![LabeledPair {
            a: "x".into(),
            b: "y".into(),
            label: 0.5,
        }];
        assert!(LabeledPairings::new(bad).is_err());
    }

    #[test]
    fn reversed_appends_swapped() {
        let d = ds(2).with_reversed();
        assert_eq!(d.len(), 4);
        assert_eq!(d.pairs()[3], ("b1".into(), "a1".into()));
    }

    #[test]
    fn empty_sentences_rejected() {
        assert!(PairDataset::new(vec![("a".into(), " ".into())], PairKind::Caption, "x").is_err());
    }
}
