//! Synthetic bilingual corpora with similarity known by construction.
//!
//! Language-1 sentences are random token sequences. Their "translations"
//! relabel every token through a fixed seeded bijection onto the
//! language-2 vocabulary. Entailment and caption pairs are language-2
//! paraphrases: a budget of `edit_rate · len` tokens is deleted or replaced,
//! then neighbouring tokens are randomly swapped (window of 2).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PairDataset, PairKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocab_l1: usize,
    pub vocab_l2: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_translation: usize,
    pub n_entailment: usize,
    pub n_eval: usize,
    pub edit_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_l1: 200,
            vocab_l2: 200,
            min_len: 4,
            max_len: 12,
            n_translation: 5000,
            n_entailment: 4000,
            n_eval: 1000,
            edit_rate: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_l1 == 0 || self.vocab_l2 == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if self.vocab_l1 != self.vocab_l2 {
            return bad(format!(
                "token-wise bijection needs equal vocabularies, got {} and {}",
                self.vocab_l1, self.vocab_l2
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "sentence length range {}..={} is empty",
                self.min_len, self.max_len
            ));
        }
        if self.n_translation == 0 || self.n_entailment == 0 || self.n_eval == 0 {
            return bad("corpus sizes must be positive".into());
        }
        if !(self.edit_rate > 0.0 && self.edit_rate < 1.0) {
            return bad(format!("edit_rate {} outside (0, 1)", self.edit_rate));
        }
        Ok(())
    }
}

pub fn l1_token(i: usize) -> String {
    format!("en{i:03}")
}

pub fn l2_token(i: usize) -> String {
    format!("tr{i:03}")
}

/// The seeded token bijection between the two synthetic languages.
#[derive(Clone, Debug)]
pub struct Translator {
    forward: Vec<usize>,
    l1_index: HashMap<String, usize>,
    l2_index: HashMap<String, usize>,
    inverse: Vec<usize>,
}

impl Translator {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut forward: Vec<usize> = (0..vocab).collect();
        forward.shuffle(&mut rng);
        let mut inverse = vec![0; vocab];
        for (i, &j) in forward.iter().enumerate() {
            inverse[j] = i;
        }
        Translator {
            forward,
            inverse,
            l1_index: (0..vocab).map(|i| (l1_token(i), i)).collect(),
            l2_index: (0..vocab).map(|i| (l2_token(i), i)).collect(),
        }
    }

    /// Translates language-1 text token-wise; `None` if a token is foreign.
    pub fn to_l2(&self, sentence: &str) -> Option<String> {
        sentence
            .split_whitespace()
            .map(|t| self.l1_index.get(t).map(|&i| l2_token(self.forward[i])))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.join(" "))
    }

    pub fn to_l1(&self, sentence: &str) -> Option<String> {
        sentence
            .split_whitespace()
            .map(|t| self.l2_index.get(t).map(|&i| l1_token(self.inverse[i])))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.join(" "))
    }
}

fn random_sentence(rng: &mut impl Rng, cfg: &SynthConfig) -> Vec<usize> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    (0..len).map(|_| rng.gen_range(0..cfg.vocab_l1)).collect()
}

/// Number of edited positions for a sentence of `len` tokens.
pub fn edit_budget(len: usize, edit_rate: f64) -> usize {
    (edit_rate * len as f64 + 1e-9).floor() as usize
}

/// Deletes or replaces `edit_budget` tokens, then swaps random neighbours.
pub fn paraphrase(rng: &mut impl Rng, tokens: &[usize], vocab: usize, edit_rate: f64) -> Vec<usize> {
    let budget = edit_budget(tokens.len(), edit_rate);
    let mut picked = index::sample(rng, tokens.len(), budget).into_vec();
    picked.sort_unstable();
    let mut keep: Vec<Option<usize>> = tokens.iter().copied().map(Some).collect();
    let mut deleted = 0;
    for &pos in &picked {
        let can_delete = tokens.len() - deleted > 1;
        if can_delete && rng.gen_bool(0.5) {
            keep[pos] = None;
            deleted += 1;
        } else if vocab > 1 {
            let mut r = rng.gen_range(0..vocab - 1);
            if r >= tokens[pos] {
                r += 1;
            }
            keep[pos] = Some(r);
        }
    }
    let mut out: Vec<usize> = keep.into_iter().flatten().collect();
    let mut i = 0;
    while i + 1 < out.len() {
        if rng.gen_bool(0.5) {
            out.swap(i, i + 1);
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

fn render(tokens: &[usize], name: fn(usize) -> String) -> String {
    tokens.iter().map(|&t| name(t)).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug)]
pub struct SynthCorpora {
    pub translation: PairDataset,
    pub entailment: PairDataset,
    pub eval: PairDataset,
    pub translator: Translator,
}

/// Generates translation pairs (L1, L2), L2 entailment pairs (sentence,
/// paraphrase) and L2 caption pairs (two paraphrases of one source).
pub fn synth_bilingual(cfg: &SynthConfig) -> Result<SynthCorpora> {
    cfg.validate()?;
    let translator = Translator::new(cfg.vocab_l1, cfg.seed);
    let to_l2 = |s: &[usize]| -> Vec<usize> { s.iter().map(|&t| translator.forward[t]).collect() };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let translation = (0..cfg.n_translation)
        .map(|_| {
            let s = random_sentence(&mut rng, cfg);
            (render(&s, l1_token), render(&to_l2(&s), l2_token))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let entailment = (0..cfg.n_entailment)
        .map(|_| {
            let s = to_l2(&random_sentence(&mut rng, cfg));
            let p = paraphrase(&mut rng, &s, cfg.vocab_l2, cfg.edit_rate);
            (render(&s, l2_token), render(&p, l2_token))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let eval = (0..cfg.n_eval)
        .map(|_| {
            let s = to_l2(&random_sentence(&mut rng, cfg));
            let a = paraphrase(&mut rng, &s, cfg.vocab_l2, cfg.edit_rate);
            let b = paraphrase(&mut rng, &s, cfg.vocab_l2, cfg.edit_rate);
            (render(&a, l2_token), render(&b, l2_token))
        })
        .collect();

    Ok(SynthCorpora {
        translation: PairDataset::new(translation, PairKind::Translation, "synth:translation")?,
        entailment: PairDataset::new(entailment, PairKind::Entailment, "synth:entailment")?,
        eval: PairDataset::new(eval, PairKind::Caption, "synth:eval")?,
        translator,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCounts {
    pub translation: usize,
    pub entailment: usize,
    pub eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub counts: SynthCounts,
    pub files: Vec<PathBuf>,
}

pub const TRANSLATION_FILE: &str = "translation.tsv";
pub const ENTAILMENT_FILE: &str = "entailment.tsv";
pub const EVAL_FILE: &str = "eval.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the three corpora as TSV plus `manifest.json` into `dir`.
pub fn write_synth_corpora(cfg: &SynthConfig, dir: &Path) -> Result<SynthManifest> {
    let corpora = synth_bilingual(cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let files = [TRANSLATION_FILE, ENTAILMENT_FILE, EVAL_FILE];
    for (ds, name) in [&corpora.translation, &corpora.entailment, &corpora.eval]
        .into_iter()
        .zip(files)
    {
        ds.save_tsv(&dir.join(name))?;
    }
    let manifest = SynthManifest {
        seed: cfg.seed,
        config: cfg.clone(),
        counts: SynthCounts {
            translation: corpora.translation.len(),
            entailment: corpora.entailment.len(),
            eval: corpora.eval.len(),
        },
        files: files.iter().map(PathBuf::from).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}
