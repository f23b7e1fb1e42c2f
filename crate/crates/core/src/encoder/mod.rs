//! Sentence encoder: token embeddings, pre-norm transformer layers, masked
//! mean pooling and L2 normalization.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::text::{tokenize_batch, TokenizedBatch, Vocab};

/// Which activations are averaged into the sentence vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingSource {
    /// Raw token embedding rows, before positions and layers.
    Embeddings,
    /// Output of the last encoder layer. Same as `Embeddings` when there are
    /// no layers.
    #[default]
    LayerOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub pooling: PoolingSource,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl EncoderConfig {
    /// Small model that trains in minutes on one CPU.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: crate::text::DEFAULT_MAX_LEN,
            pooling: PoolingSource::LayerOutput,
            seed: 0,
        }
    }

    /// flan-t5-small sized: 512-wide embeddings, 8 layers, 1024-wide FFN.
    /// Heads must divide `d_model` here, so 8 heads of 64 replace t5's 6.
    pub fn paper(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 512,
            n_layers: 8,
            n_heads: 8,
            d_ff: 1024,
            max_len: crate::text::DEFAULT_MAX_LEN,
            pooling: PoolingSource::LayerOutput,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("encoder {name} must be positive")));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocabulary needs PAD and UNK".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }

    /// Expected registry layout: names and shapes in registration order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![("embed.weight".to_owned(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.w_q"), vec![d, d]),
                (p("attn.w_k"), vec![d, d]),
                (p("attn.w_v"), vec![d, d]),
                (p("attn.w_o"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        out
    }
}

/// All learnable weights, keyed by stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    registry: IndexMap<String, Tensor>,
}

/// Rank-1 registry entries: layer-norm gains/biases and FFN biases.
pub fn is_vector_param(name: &str) -> bool {
    name.ends_with(".gain") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2")
}

impl EncoderParams {
    /// Xavier-uniform matrices, unit gains and zero biases, from `cfg.seed`.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut registry = IndexMap::new();
        for (name, shape) in cfg.layout() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if is_vector_param(&name) {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            };
            registry.insert(name, Tensor::new(shape, data)?);
        }
        Ok(EncoderParams {
            config: cfg.clone(),
            registry,
        })
    }

    pub(crate) fn from_parts(config: EncoderConfig, registry: IndexMap<String, Tensor>) -> Self {
        EncoderParams { config, registry }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn registry(&self) -> &IndexMap<String, Tensor> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.registry
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.registry.get(name)
    }

    pub fn num_values(&self) -> usize {
        self.registry.values().map(Tensor::numel).sum()
    }

    /// Places every tensor on `graph`, as trainable parameters or constants.
    pub fn attach(&self, graph: &mut Graph, trainable: bool) -> ParamNodes {
        let nodes = self
            .registry
            .iter()
            .map(|(name, t)| {
                let id = if trainable {
                    graph.parameter(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), id)
            })
            .collect();
        ParamNodes { nodes }
    }
}

/// Graph handles for an attached [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    nodes: IndexMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Standard sinusoidal position table, `[seq, d]`.
pub fn sinusoidal_positions(seq: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; seq * d];
    for t in 0..seq {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 * freq;
            out[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Builds the encoder forward pass on `graph` and returns the `[B, d]`
/// node of unit-norm sentence vectors.
pub fn forward(
    graph: &mut Graph,
    params: &ParamNodes,
    cfg: &EncoderConfig,
    batch: &TokenizedBatch,
    source: PoolingSource,
) -> Result<NodeId> {
    let (b, t, d) = (batch.batch_size(), batch.seq_len(), cfg.d_model);
    if let Some(&id) = batch.ids().iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::IdOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let mask = batch.mask();
    for row in 0..b {
        if batch.real_tokens(row) == 0 {
            return Err(Error::DegenerateMask { row });
        }
    }
    let tokens = graph.gather_rows(params.get("embed.weight")?, batch.ids())?;

    let pooled_input = if source == PoolingSource::Embeddings || cfg.n_layers == 0 {
        tokens
    } else {
        let scaled = graph.scale(tokens, (d as f64).sqrt())?;
        let pe_row = sinusoidal_positions(t, d);
        let pe: Vec<f64> = (0..b).flat_map(|_| pe_row.iter().copied()).collect();
        let pe = graph.constant(Tensor::new(vec![b * t, d], pe)?);
        let mut x = graph.add(scaled, pe)?;
        for l in 0..cfg.n_layers {
            x = encoder_layer(graph, params, l, x, &mask, cfg.n_heads)?;
        }
        x
    };
    let h = graph.reshape(pooled_input, &[b, t, d])?;
    let pooled = graph.mean_pool_masked(h, &mask)?;
    graph.l2_normalize_rows(pooled)
}

fn encoder_layer(
    g: &mut Graph,
    p: &ParamNodes,
    layer: usize,
    x: NodeId,
    mask: &Tensor,
    heads: usize,
) -> Result<NodeId> {
    let w = |s: &str| p.get(&format!("layers.{layer}.{s}"));

    let h = g.layer_norm(x, w("ln1.gain")?, w("ln1.bias")?)?;
    let q = g.matmul(h, w("attn.w_q")?)?;
    let k = g.matmul(h, w("attn.w_k")?)?;
    let v = g.matmul(h, w("attn.w_v")?)?;
    let a = g.masked_self_attention(q, k, v, mask, heads)?;
    let o = g.matmul(a, w("attn.w_o")?)?;
    let x = g.add(x, o)?;

    let h = g.layer_norm(x, w("ln2.gain")?, w("ln2.bias")?)?;
    let f = g.matmul(h, w("ffn.w1")?)?;
    let f = g.add_row(f, w("ffn.b1")?)?;
    let f = g.gelu(f)?;
    let f = g.matmul(f, w("ffn.w2")?)?;
    let f = g.add_row(f, w("ffn.b2")?)?;
    g.add(x, f)
}

/// Encodes one tokenized batch without recording gradients.
pub fn encode_batch(
    params: &EncoderParams,
    batch: &TokenizedBatch,
    source: PoolingSource,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = params.attach(&mut g, false);
    let out = forward(&mut g, &nodes, params.config(), batch, source)?;
    Ok(g.value(out).clone())
}

/// Sentences encoded per forward pass by [`encode_sentences`].
pub const ENCODE_CHUNK: usize = 128;

/// Encodes an arbitrary number of sentences in fixed-size chunks using the
/// configured pooling source. Returns one unit-norm row per sentence.
pub fn encode_sentences<S: AsRef<str>>(
    params: &EncoderParams,
    vocab: &Vocab,
    sentences: &[S],
) -> Result<Vec<Vec<f64>>> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(ENCODE_CHUNK) {
        let batch = tokenize_batch(vocab, chunk, cfg.max_len)?;
        let emb = encode_batch(params, &batch, cfg.pooling)?;
        out.extend((0..emb.rows()).map(|r| emb.row(r).to_vec()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::batch_from_ids;

    fn tiny(n_layers: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers,
            n_heads: 2,
            d_ff: 12,
            max_len: 16,
            pooling: PoolingSource::LayerOutput,
            seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(&tiny(2)).unwrap();
        let b = EncoderParams::init(&tiny(2)).unwrap();
        assert_eq!(a, b);
        let mut other = tiny(2);
        other.seed = 12;
        assert_ne!(a, EncoderParams::init(&other).unwrap());
    }

    #[test]
    fn gains_ones_biases_zero() {
        let p = EncoderParams::init(&tiny(1)).unwrap();
        assert!(p.get("layers.0.ln1.gain").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.get("layers.0.ln2.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.get("layers.0.ffn.b1").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_bounds_hold_for_every_value() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        for (name, t) in p.registry() {
            if is_vector_param(name) {
                continue;
            }
            let (fi, fo) = (t.shape()[0], t.shape()[1]);
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            assert!(t.data().iter().any(|v| v.abs() > bound * 0.5), "{name}");
        }
    }

    #[test]
    fn registry_matches_layout() {
        let cfg = tiny(2);
        let p = EncoderParams::init(&cfg).unwrap();
        let names: Vec<_> = p.registry().keys().cloned().collect();
        let expect: Vec<_> = cfg.layout().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, expect);
        assert_eq!(names.len(), 1 + 12 * 2);
    }

    #[test]
    fn invalid_head_count_rejected() {
        let mut cfg = tiny(1);
        cfg.n_heads = 3;
        assert!(EncoderParams::init(&cfg).is_err());
    }

    #[test]
    fn single_token_without_layers_is_normalized_row() {
        let p = EncoderParams::init(&tiny(0)).unwrap();
        let batch = batch_from_ids(&[vec![4]], 16, 10).unwrap();
        let out = encode_batch(&p, &batch, PoolingSource::Embeddings).unwrap();
        let row = p.get("embed.weight").unwrap().row(4);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (o, r) in out.data().iter().zip(row) {
            assert!((o - r / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn outputs_unit_norm_and_duplicates_identical() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        let batch = batch_from_ids(&[vec![2, 3, 4], vec![5], vec![2, 3, 4]], 16, 10).unwrap();
        let out = encode_batch(&p, &batch, PoolingSource::LayerOutput).unwrap();
        for r in 0..3 {
            let n = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let p = EncoderParams::init(&tiny(1)).unwrap();
        let batch = batch_from_ids(&[vec![12]], 16, 20).unwrap();
        assert!(matches!(
            encode_batch(&p, &batch, PoolingSource::LayerOutput),
            Err(Error::IdOutOfRange { id: 12, .. })
        ));
    }
}
