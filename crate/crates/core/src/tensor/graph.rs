use super::kernels::{self, logsumexp, matmul_nn, matmul_nt, matmul_tn, softmax_in_place};
use super::{Tensor, MASK_BIAS, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Constant,
    Parameter,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Reshape(NodeId),
    Gelu(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanPool {
        x: NodeId,
        mask: Vec<f64>,
        batch: usize,
        seq: usize,
    },
    L2Normalize {
        x: NodeId,
        norms: Vec<f64>,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Constant | Op::Parameter => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Transpose(a) | Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Gelu(a) => {
                vec![a]
            }
            Op::Gather { table, .. } => vec![table],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::MeanPool { x, .. } | Op::L2Normalize { x, .. } => vec![x],
            Op::SoftmaxXent { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation graph. Nodes are stored in creation order,
/// which is a topological order because an op can only reference nodes
/// that already exist.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    seed: u64,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Parameter, true)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let t = self.check(id)?;
        match *t.shape() {
            [m, n] => Ok((m, n)),
            _ => Err(Error::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push_op(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        Ok(self.push_op(Tensor::new(vec![n, m], out)?, Op::Transpose(a)))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    /// Adds a `[d]` vector to every row of a `[.., d]` tensor.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        if tb.shape().len() != 1 || tb.numel() != tx.last_dim() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let d = tb.numel();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Scale(a, factor)))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.check(a)?.data().iter().sum();
        Ok(self.push_op(Tensor::scalar(total), Op::Sum(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.check(a)?.clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(out, Op::Reshape(a)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.check(a)?;
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Gelu(a)))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("gather_rows ids".into()));
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab_size: rows,
                });
            }
            data.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push_op(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tg, tb) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let d = tx.last_dim();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: tx.shape().to_vec(),
                right: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut normed = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * rs;
                normed.push(n);
                data.push(n * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over `[batch * seq, d]`
    /// projections. Keys at masked positions get [`MASK_BIAS`] added to their
    /// logits. Output has the concatenated-heads layout `[batch * seq, d]`.
    pub fn masked_self_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &Tensor,
        heads: usize,
    ) -> Result<NodeId> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (n, d) = self.matrix_dims(q, "attention")?;
        let (batch, seq) = match *mask.shape() {
            [b, t] if b * t == n => (b, t),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    left: vec![n, d],
                    right: mask.shape().to_vec(),
                })
            }
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "{heads} heads do not divide width {d}"
            )));
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; n * d];
        for b in 0..batch {
            let m = &mask.data()[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = h * dh;
                let p_base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    let p_row = &mut probs[p_base + i * seq..p_base + (i + 1) * seq];
                    for (j, p) in p_row.iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + off..][..dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        *p = dot * inv_sqrt + if m[j] > 0.0 { 0.0 } else { MASK_BIAS };
                    }
                    softmax_in_place(p_row);
                    let o = &mut out[(b * seq + i) * d + off..][..dh];
                    for (j, &p) in p_row.iter().enumerate() {
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push_op(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
        ))
    }

    /// `out[b] = Σ_t mask[b,t]·x[b,t] / Σ_t mask[b,t]` for `x: [B, T, d]`.
    pub fn mean_pool_masked(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let tx = self.check(x)?;
        let (batch, seq, d) = match *tx.shape() {
            [b, t, d] if mask.shape() == [b, t] => (b, t, d),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "mean_pool_masked",
                    left: tx.shape().to_vec(),
                    right: mask.shape().to_vec(),
                })
            }
        };
        let mut data = vec![0.0; batch * d];
        for b in 0..batch {
            let m = &mask.data()[b * seq..(b + 1) * seq];
            let count: f64 = m.iter().sum();
            if count <= 0.0 {
                return Err(Error::DegenerateMask { row: b });
            }
            let o = &mut data[b * d..(b + 1) * d];
            for (t, &w) in m.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (oc, xc) in o.iter_mut().zip(tx.row(b * seq + t)) {
                    *oc += w * xc;
                }
            }
            for oc in o.iter_mut() {
                *oc /= count;
            }
        }
        let out = Tensor::new(vec![batch, d], data)?;
        Ok(self.push_op(
            out,
            Op::MeanPool {
                x,
                mask: mask.data().to_vec(),
                batch,
                seq,
            },
        ))
    }

    /// Divides each row by `max(‖row‖₂, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.check(x)?;
        let rows = tx.rows();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..rows {
            let row = tx.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            norms.push(norm);
            data.extend(row.iter().map(|v| v / denom));
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::L2Normalize { x, norms }))
    }

    /// Mean over rows of `logsumexp(S[i]) − S[i, targets[i]]`.
    pub fn softmax_cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId> {
        let (rows, classes) = self.matrix_dims(logits, "softmax_cross_entropy_rows")?;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy_rows",
                left: vec![rows, classes],
                right: vec![targets.len()],
            });
        }
        let ts = self.value(logits);
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::TargetOutOfRange {
                    row: i,
                    index: t,
                    classes,
                });
            }
            let row = ts.row(i);
            total += logsumexp(row) - row[t];
            let start = probs.len();
            probs.extend_from_slice(row);
            softmax_in_place(&mut probs[start..]);
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push_op(
            out,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse traversal from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.check(loss)?;
        if !root.is_scalar() {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].needs_grad;
        let mut acc = |id: NodeId, delta: Vec<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Parameter => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    acc(a, matmul_nt(g, tb.data(), m, n, k));
                }
                if wants(b) {
                    acc(b, matmul_tn(ta.data(), g, m, k, n));
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                acc(a, kernels::transpose(g, n, m));
            }
            &Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            &Op::AddRow(x, bias) => {
                acc(x, g.to_vec());
                if wants(bias) {
                    let d = val(bias).numel();
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(bias, gb);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a).data(), val(b).data());
                if wants(a) {
                    acc(a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    acc(b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
            }
            &Op::Scale(a, factor) => acc(a, g.iter().map(|v| v * factor).collect()),
            &Op::Sum(a) => acc(a, vec![g[0]; val(a).numel()]),
            &Op::Reshape(a) => acc(a, g.to_vec()),
            &Op::Gelu(a) => {
                let dx = val(a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                acc(a, dx);
            }
            Op::Gather { table, ids } => {
                let d = val(*table).shape()[1];
                let mut gt = vec![0.0; val(*table).numel()];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(s, v)| *s += v);
                }
                acc(*table, gt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let d = val(*gain).numel();
                let gd = val(*gain).data();
                let mut gx = vec![0.0; normed.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let xh = &normed[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gy[j] * gd[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        gg[j] += gy[j] * xh[j];
                        gb[j] += gy[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gy[j] * gd[j];
                        gx[r * d + j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            &Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                ref probs,
            } => {
                let (n, d) = (val(q).shape()[0], val(q).shape()[1]);
                let dh = d / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * d];
                let mut gv = vec![0.0; n * d];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        let p_base = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let p_row = &probs[p_base + i * seq..p_base + (i + 1) * seq];
                            let go = &g[(b * seq + i) * d + off..][..dh];
                            // dP = dO·Vᵀ, dV += Pᵀ·dO
                            for j in 0..seq {
                                let row = (b * seq + j) * d + off;
                                let vj = &vd[row..row + dh];
                                dp[j] = go.iter().zip(vj).map(|(x, y)| x * y).sum();
                                let p = p_row[j];
                                if p != 0.0 {
                                    gv[row..row + dh]
                                        .iter_mut()
                                        .zip(go)
                                        .for_each(|(s, o)| *s += p * o);
                                }
                            }
                            // dS = P ∘ (dP − Σ_j P·dP)
                            let inner: f64 = p_row.iter().zip(&dp).map(|(p, d)| p * d).sum();
                            let qrow = (b * seq + i) * d + off;
                            for j in 0..seq {
                                let ds = p_row[j] * (dp[j] - inner) * inv_sqrt;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * seq + j) * d + off;
                                for c in 0..dh {
                                    gq[qrow + c] += ds * kd[krow + c];
                                    gk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                        }
                    }
                }
                acc(q, gq);
                acc(k, gk);
                acc(v, gv);
            }
            &Op::MeanPool {
                x,
                ref mask,
                batch,
                seq,
            } => {
                let d = val(x).last_dim();
                let mut gx = vec![0.0; batch * seq * d];
                for b in 0..batch {
                    let m = &mask[b * seq..(b + 1) * seq];
                    let count: f64 = m.iter().sum();
                    let gb = &g[b * d..(b + 1) * d];
                    for (t, &w) in m.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let dst = &mut gx[(b * seq + t) * d..(b * seq + t + 1) * d];
                        dst.iter_mut()
                            .zip(gb)
                            .for_each(|(s, v)| *s = w * v / count);
                    }
                }
                acc(x, gx);
            }
            Op::L2Normalize { x, norms } => {
                let out = &node.value;
                let d = out.last_dim();
                let mut gx = vec![0.0; out.numel()];
                for (r, &norm) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gy = &g[r * d..(r + 1) * d];
                    let dst = &mut gx[r * d..(r + 1) * d];
                    if norm > NORM_EPS {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dst[j] = (gy[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            dst[j] = gy[j] / NORM_EPS;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let classes = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut gs: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gs[i * classes + t] -= scale;
                }
                acc(*logits, gs);
            }
        }
    }
}
