//! Contrastive loss over in-batch negatives and the Adam update.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MnrlConfig {
    /// Multiplier applied to cosine similarities before the softmax.
    pub scale: f64,
    /// Average the loss over both matching directions.
    pub symmetric: bool,
}

impl Default for MnrlConfig {
    fn default() -> Self {
        MnrlConfig {
            scale: 20.0,
            symmetric: true,
        }
    }
}

impl MnrlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "MNRL scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotNormalized { row: r, norm });
        }
    }
    Ok(())
}

/// Multiple negatives ranking loss: row `i` of `u` should match row `i` of
/// `v` against every other row of `v` in the batch. Both inputs must hold
/// unit-norm rows, so `u·vᵀ` is a cosine similarity matrix.
pub fn mnrl_loss(graph: &mut Graph, u: NodeId, v: NodeId, cfg: &MnrlConfig) -> Result<NodeId> {
    cfg.validate()?;
    let (tu, tv) = (graph.value(u), graph.value(v));
    if tu.shape() != tv.shape() || tu.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mnrl_loss",
            left: tu.shape().to_vec(),
            right: tv.shape().to_vec(),
        });
    }
    check_unit_rows(tu)?;
    check_unit_rows(tv)?;
    let batch = tu.shape()[0];
    let targets: Vec<usize> = (0..batch).collect();

    let vt = graph.transpose(v)?;
    let sim = graph.matmul(u, vt)?;
    let logits = graph.scale(sim, cfg.scale)?;
    let forward = graph.softmax_cross_entropy_rows(logits, &targets)?;
    if !cfg.symmetric {
        return Ok(forward);
    }
    let logits_t = graph.transpose(logits)?;
    let backward = graph.softmax_cross_entropy_rows(logits_t, &targets)?;
    let both = graph.add(forward, backward)?;
    graph.scale(both, 0.5)
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cosine_similarity input".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    match (nu > 0.0, nv > 0.0) {
        (false, false) => Err(Error::UndefinedSimilarity("both vectors are zero".into())),
        (true, true) => Ok((dot / (nu * nv)).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

/// Whether weight decay applies to a registry entry: matrices only, never
/// layer-norm gains/biases or other vectors.
pub fn decays(tensor: &Tensor) -> bool {
    tensor.shape().len() >= 2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decay weights directly (AdamW). When false the decay term is added to
    /// the gradient instead (L2 regularization).
    pub decoupled: bool,
    /// Linear learning-rate warmup over this many steps; 0 disables it.
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Replaces the hyperparameters and keeps the moments and step counter.
    pub fn set_config(&mut self, config: AdamConfig) {
        self.config = config;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 || self.step >= c.warmup_steps {
            c.lr
        } else {
            c.lr * self.step as f64 / c.warmup_steps as f64
        }
    }

    /// One Adam update with bias correction. Gradients are validated before
    /// any parameter changes, so a rejected step leaves everything intact.
    pub fn step(
        &mut self,
        params: &mut IndexMap<String, Tensor>,
        grads: &IndexMap<String, Vec<f64>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} contains {bad}")));
            }
        }

        self.step += 1;
        let c = self.config.clone();
        let lr = self.current_lr();
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let wd = if decays(p) { c.weight_decay } else { 0.0 };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                let gi = if c.decoupled { gi } else { gi + wd * *theta };
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                if c.decoupled && wd != 0.0 {
                    *theta -= lr * wd * *theta;
                }
                *theta -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
