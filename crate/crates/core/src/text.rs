//! Word-level vocabulary and batch tokenization.
//!
//! Sentences are NFC-normalized, case-folded according to [`Casing`], and
//! split on whitespace. Ids 0 and 1 are reserved for padding and unknown
//! tokens. Users who prefer an external subword tokenizer can feed its
//! integer output through [`read_pretokenized`] and [`batch_from_ids`].

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MAX_LEN: usize = 64;

/// Case folding applied before splitting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Casing {
    /// Unicode default lowercasing.
    #[default]
    Lower,
    /// Turkish dotted/dotless i rules (`I → ı`, `İ → i`) then lowercasing.
    Turkish,
    /// Leave case untouched.
    Preserve,
}

/// Normalizes and splits one sentence into tokens.
pub fn normalize_tokens(sentence: &str, casing: Casing) -> Vec<String> {
    let nfc: String = sentence.nfc().collect();
    let folded = match casing {
        Casing::Lower => nfc.to_lowercase(),
        Casing::Turkish => nfc
            .chars()
            .map(|c| match c {
                'I' => 'ı',
                'İ' => 'i',
                c => c,
            })
            .collect::<String>()
            .to_lowercase(),
        Casing::Preserve => nfc,
    };
    folded.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
    casing: Casing,
}

impl Vocab {
    fn from_tokens(words: Vec<String>, min_freq: usize, casing: Casing) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            min_freq,
            casing,
        })
    }

    /// Builds a vocabulary from every token seen at least `min_freq` times.
    /// Ids are assigned by descending frequency, ties broken lexicographically.
    pub fn build<'a, I>(corpus: I, min_freq: usize, casing: Casing) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq == 0 {
            return Err(Error::InvalidConfig("min_freq must be positive".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut sentences = 0usize;
        for sentence in corpus {
            sentences += 1;
            for tok in normalize_tokens(sentence, casing) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if sentences == 0 {
            return Err(Error::EmptyInput("vocabulary corpus".into()));
        }
        counts.remove(PAD_TOKEN);
        counts.remove(UNK_TOKEN);
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect(), min_freq, casing)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn casing(&self) -> Casing {
        self.casing
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        normalize_tokens(sentence, self.casing)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// Writes one token per line, starting at id 2.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for tok in &self.tokens[2..] {
            writeln!(out, "{tok}").expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path, casing: Casing) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let words = text.lines().map(str::to_owned).collect();
        Self::from_tokens(words, 1, casing)
    }
}

/// Padded id matrix with its 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    ids: Vec<usize>,
    mask: Vec<f64>,
    batch: usize,
    seq: usize,
}

impl TokenizedBatch {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq
    }

    /// Row-major `[batch, seq]` ids.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn ids_row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    pub fn mask_row(&self, b: usize) -> &[f64] {
        &self.mask[b * self.seq..(b + 1) * self.seq]
    }

    pub fn mask(&self) -> Tensor {
        Tensor::new(vec![self.batch, self.seq], self.mask.clone()).expect("mask shape")
    }

    pub fn real_tokens(&self, b: usize) -> usize {
        self.mask_row(b).iter().filter(|&&m| m > 0.0).count()
    }
}

/// Tokenizes `sentences` into a right-padded batch truncated at `max_len`.
pub fn tokenize_batch<S: AsRef<str>>(
    vocab: &Vocab,
    sentences: &[S],
    max_len: usize,
) -> Result<TokenizedBatch> {
    let rows = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ids = vocab.encode(s.as_ref());
            if ids.is_empty() {
                Err(Error::EmptyInput(format!("sentence {i} is blank")))
            } else {
                Ok(ids)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    batch_from_ids(&rows, max_len, vocab.len())
}

/// Pads pre-tokenized id sequences into a batch.
pub fn batch_from_ids(rows: &[Vec<usize>], max_len: usize, vocab_size: usize) -> Result<TokenizedBatch> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("batch has no sentences".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be positive".into()));
    }
    let seq = rows.iter().map(Vec::len).max().unwrap_or(0).min(max_len);
    let mut ids = vec![PAD_ID; rows.len() * seq];
    let mut mask = vec![0.0; rows.len() * seq];
    for (b, row) in rows.iter().enumerate() {
        if row.is_empty() {
            return Err(Error::EmptyInput(format!("sentence {b} has no tokens")));
        }
        for (t, &id) in row.iter().take(seq).enumerate() {
            if id >= vocab_size || id == PAD_ID {
                return Err(Error::IdOutOfRange { id, vocab_size });
            }
            ids[b * seq + t] = id;
            mask[b * seq + t] = 1.0;
        }
    }
    Ok(TokenizedBatch {
        ids,
        mask,
        batch: rows.len(),
        seq,
    })
}

/// Reads a file of space-separated decimal ids, one sentence per line.
pub fn read_pretokenized(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::InvalidConfig(format!(
                            "{}:{}: `{tok}` is not a token id",
                            path.display(),
                            n + 1
                        ))
                    })
                })
                .collect()
        })
        .collect()
}
