//! Independent reference implementations used as test oracles. Nothing in
//! this file calls into the library's numerical code; `checks` does the
//! comparisons.

#![allow(dead_code)]

pub mod checks;

use aligntune::encoder::{EncoderConfig, EncoderParams};
use aligntune::tensor::Tensor;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn triple_loop_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Mean of the unmasked token vectors of one sequence.
pub fn scalar_mean_pool(x: &[Vec<f64>], mask: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let mut out = vec![0.0; d];
    let mut count = 0.0;
    for (t, row) in x.iter().enumerate() {
        if mask[t] != 0.0 {
            count += 1.0;
            for j in 0..d {
                out[j] += row[j];
            }
        }
    }
    out.iter().map(|v| v / count).collect()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Cross-entropy of each row against its target with a plain softmax, no
/// max subtraction.
pub fn naive_cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / z).ln();
    }
    total / logits.len() as f64
}

pub fn naive_mnrl(u: &[Vec<f64>], v: &[Vec<f64>], scale: f64, symmetric: bool) -> f64 {
    let b = u.len();
    let s: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            (0..b)
                .map(|j| scale * u[i].iter().zip(&v[j]).map(|(x, y)| x * y).sum::<f64>())
                .collect()
        })
        .collect();
    let targets: Vec<usize> = (0..b).collect();
    let forward = naive_cross_entropy(&s, &targets);
    if !symmetric {
        return forward;
    }
    (forward + naive_cross_entropy(&transpose(&s), &targets)) / 2.0
}

/// Textbook Adam on one scalar, decoupled decay applied before the update.
#[derive(Clone, Debug)]
pub struct ScalarAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, wd: f64) -> Self {
        ScalarAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            wd,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn update(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t));
        let decayed = theta * (1.0 - self.lr * self.wd);
        decayed - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Returns eigenvalues in
/// descending order with matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| v.iter().map(|row| row[i]).collect()).collect();
    (values, vectors)
}

pub fn sample_covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in c.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    c
}

/// Single-pass sums formula for Pearson r.
pub fn pearson_one_pass(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn tiny_encoder(vocab_size: usize, d: usize, layers: usize, heads: usize, d_ff: usize, seed: u64) -> EncoderParams {
    EncoderParams::init(&EncoderConfig {
        vocab_size,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff,
        max_len: 16,
        seed,
        ..EncoderConfig::desk(vocab_size)
    })
    .unwrap()
}

fn mat(reg: &IndexMap<String, Tensor>, name: &str) -> Vec<Vec<f64>> {
    let t = &reg[name];
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn vector(reg: &IndexMap<String, Tensor>, name: &str) -> Vec<f64> {
    reg[name].data().to_vec()
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gain[j] + bias[j])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Scalar-loop transformer encoder over one unpadded token sequence:
/// scaled embeddings plus sinusoidal positions, pre-norm layers, mean pool,
/// L2 normalization.
pub fn scalar_encode(params: &EncoderParams, ids: &[usize]) -> Vec<f64> {
    let cfg = params.config();
    let reg = params.registry();
    let (d, t_len) = (cfg.d_model, ids.len());
    let embed = mat(reg, "embed.weight");
    if cfg.n_layers == 0 {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| embed[i].clone()).collect();
        return unit(&scalar_mean_pool(&rows, &vec![1.0; t_len]));
    }
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                    let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                    embed[id][i] * (d as f64).sqrt() + pe
                })
                .collect()
        })
        .collect();
    let heads = cfg.n_heads;
    let dh = d / heads;
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm_row(r, &vector(reg, &p("ln1.gain")), &vector(reg, &p("ln1.bias"))))
            .collect();
        let q = triple_loop_matmul(&h, &mat(reg, &p("attn.w_q")));
        let k = triple_loop_matmul(&h, &mat(reg, &p("attn.w_k")));
        let v = triple_loop_matmul(&h, &mat(reg, &p("attn.w_v")));
        let mut att = vec![vec![0.0; d]; t_len];
        for hd in 0..heads {
            for i in 0..t_len {
                let scores: Vec<f64> = (0..t_len)
                    .map(|j| (0..dh).map(|c| q[i][hd * dh + c] * k[j][hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..t_len {
                    let w = (scores[j] - mx).exp() / z;
                    for c in 0..dh {
                        att[i][hd * dh + c] += w * v[j][hd * dh + c];
                    }
                }
            }
        }
        let o = triple_loop_matmul(&att, &mat(reg, &p("attn.w_o")));
        for i in 0..t_len {
            for j in 0..d {
                x[i][j] += o[i][j];
            }
        }
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| layer_norm_row(r, &vector(reg, &p("ln2.gain")), &vector(reg, &p("ln2.bias"))))
            .collect();
        let b1 = vector(reg, &p("ffn.b1"));
        let b2 = vector(reg, &p("ffn.b2"));
        let f: Vec<Vec<f64>> = triple_loop_matmul(&h, &mat(reg, &p("ffn.w1")))
            .into_iter()
            .map(|r| r.iter().zip(&b1).map(|(a, b)| gelu(a + b)).collect())
            .collect();
        let f = triple_loop_matmul(&f, &mat(reg, &p("ffn.w2")));
        for i in 0..t_len {
            for j in 0..d {
                x[i][j] += f[i][j] + b2[j];
            }
        }
    }
    unit(&scalar_mean_pool(&x, &vec![1.0; t_len]))
}
