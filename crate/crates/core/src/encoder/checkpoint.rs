//! Binary checkpoint format.
//!
//! ```text
//! "BTN1" | u32 LE header length | header JSON | f64 LE payload | u32 LE CRC32(payload)
//! ```
//!
//! The header carries the format version, the encoder config and a manifest
//! of `{name, shape, offset}` entries, with `offset` in bytes from the start
//! of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BTN1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn encode(params: &EncoderParams) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.registry().len());
    let mut payload = Vec::with_capacity(params.num_values() * 8);
    for (name, t) in params.registry() {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        version: VERSION,
        config: params.config().clone(),
        tensors,
    })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::InvalidConfig("checkpoint header too large".into()))?;

    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

/// Writes `params` to `path` through a temporary file and an atomic rename,
/// so a reader never observes a half-written checkpoint.
pub fn save_checkpoint(params: &EncoderParams, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    let tmp = path.with_extension("tmp");
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

fn decode(bytes: &[u8]) -> Result<EncoderParams> {
    let corrupt = |msg: &str| Error::Integrity(msg.to_owned());
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing BTN1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = 8usize
        .checked_add(header_len)
        .filter(|&s| s + 4 <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Version(header.version));
    }

    let payload = &bytes[payload_start..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored_crc {
        return Err(corrupt("payload CRC mismatch (truncated or corrupted file)"));
    }

    header.config.validate()?;
    let layout = header.config.layout();
    if layout.len() != header.tensors.len() {
        return Err(Error::DimensionMismatch(format!(
            "config implies {} tensors, manifest lists {}",
            layout.len(),
            header.tensors.len()
        )));
    }
    let mut registry = IndexMap::with_capacity(layout.len());
    let mut cursor = 0usize;
    for ((name, shape), entry) in layout.into_iter().zip(header.tensors) {
        if entry.name != name || entry.shape != shape {
            return Err(Error::DimensionMismatch(format!(
                "manifest entry {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        if entry.offset != cursor {
            return Err(corrupt("manifest offsets are not contiguous"));
        }
        let n: usize = shape.iter().product();
        let end = cursor + n * 8;
        if end > payload.len() {
            return Err(corrupt("payload shorter than manifest"));
        }
        let data = payload[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        registry.insert(name, Tensor::new(shape, data)?);
        cursor = end;
    }
    if cursor != payload.len() {
        return Err(corrupt("payload longer than manifest"));
    }
    Ok(EncoderParams::from_parts(header.config, registry))
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

/// Loads a checkpoint and checks its architecture against `expected`
/// (vocabulary size and all layer widths; the seed is ignored).
pub fn load_checkpoint_expecting(path: &Path, expected: &EncoderConfig) -> Result<EncoderParams> {
    let params = load_checkpoint(path)?;
    let got = params.config();
    let pairs = [
        ("vocab_size", got.vocab_size, expected.vocab_size),
        ("d_model", got.d_model, expected.d_model),
        ("n_layers", got.n_layers, expected.n_layers),
        ("n_heads", got.n_heads, expected.n_heads),
        ("d_ff", got.d_ff, expected.d_ff),
    ];
    for (name, g, e) in pairs {
        if g != e {
            return Err(Error::DimensionMismatch(format!(
                "{name}: checkpoint has {g}, expected {e}"
            )));
        }
    }
    Ok(params)
}
