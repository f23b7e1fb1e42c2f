//! Measurements that pit library code against the oracles in the parent
//! module. Each returns the observed error so callers can assert or report.

use super::*;
use aligntune::encoder::{forward, EncoderParams, PoolingSource};
use aligntune::evalkit::pca_project;
use aligntune::optim::{mnrl_loss, AdamConfig, AdamState, MnrlConfig};
use aligntune::tensor::{grad_check, Graph, NodeId, Tensor, DEFAULT_STEP};
use aligntune::text::batch_from_ids;
use aligntune::Result;
use indexmap::IndexMap;
use rand::Rng;

/// `Σ op(x) ⊙ r` for a fixed random `r`, so every output coordinate
/// contributes a distinct weight to the gradient.
fn weighted_sum(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(random_tensor(&mut rng(seed), &shape));
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

/// Relative gradient error for every differentiable op, by name.
pub fn op_gradient_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut check = |name: &str, x0: &Tensor, build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId>| {
        out.push((name.to_owned(), grad_check(build, x0, DEFAULT_STEP).unwrap()));
    };

    let mut r = rng(4);
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[4, 2]);
    let same = random_tensor(&mut r, &[3, 4]);
    let row = random_tensor(&mut r, &[4]);

    check("matmul lhs", &a, &|g, x| {
        let c = g.constant(b.clone());
        let y = g.matmul(x, c)?;
        weighted_sum(g, y, 10)
    });
    check("matmul rhs", &b, &|g, x| {
        let c = g.constant(a.clone());
        let y = g.matmul(c, x)?;
        weighted_sum(g, y, 11)
    });
    check("transpose", &a, &|g, x| {
        let y = g.transpose(x)?;
        weighted_sum(g, y, 12)
    });
    check("add", &a, &|g, x| {
        let c = g.constant(same.clone());
        let y = g.add(x, c)?;
        weighted_sum(g, y, 13)
    });
    check("add_row matrix", &a, &|g, x| {
        let c = g.constant(row.clone());
        let y = g.add_row(x, c)?;
        weighted_sum(g, y, 14)
    });
    check("add_row bias", &row, &|g, x| {
        let c = g.constant(a.clone());
        let y = g.add_row(c, x)?;
        weighted_sum(g, y, 15)
    });
    check("mul", &a, &|g, x| {
        let c = g.constant(same.clone());
        let y = g.mul(x, c)?;
        weighted_sum(g, y, 16)
    });
    check("mul self", &a, &|g, x| {
        let y = g.mul(x, x)?;
        weighted_sum(g, y, 17)
    });
    check("scale", &a, &|g, x| {
        let y = g.scale(x, -2.5)?;
        weighted_sum(g, y, 18)
    });
    check("reshape", &a, &|g, x| {
        let y = g.reshape(x, &[2, 6])?;
        weighted_sum(g, y, 19)
    });
    check("gelu", &a, &|g, x| {
        let y = g.gelu(x)?;
        weighted_sum(g, y, 20)
    });
    check("gather_rows", &a, &|g, x| {
        let y = g.gather_rows(x, &[2, 0, 2, 1])?;
        weighted_sum(g, y, 21)
    });
    check("sum", &a, &|g, x| g.sum(x));

    let mut r = rng(5);
    let x = random_tensor(&mut r, &[6, 4]);
    let gain = random_tensor(&mut r, &[4]);
    let bias = random_tensor(&mut r, &[4]);
    check("layer_norm x", &x, &|g, p| {
        let (gn, bn) = (g.constant(gain.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(p, gn, bn)?;
        weighted_sum(g, y, 30)
    });
    check("layer_norm gain", &gain, &|g, p| {
        let (xn, bn) = (g.constant(x.clone()), g.constant(bias.clone()));
        let y = g.layer_norm(xn, p, bn)?;
        weighted_sum(g, y, 31)
    });
    check("layer_norm bias", &bias, &|g, p| {
        let (xn, gn) = (g.constant(x.clone()), g.constant(gain.clone()));
        let y = g.layer_norm(xn, gn, p)?;
        weighted_sum(g, y, 32)
    });

    // two sequences of length 3, the second padded after one token
    let mask = Tensor::new(vec![2, 3], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let qkv = [
        random_tensor(&mut r, &[6, 4]),
        random_tensor(&mut r, &[6, 4]),
        random_tensor(&mut r, &[6, 4]),
    ];
    for (which, name) in ["attention q", "attention k", "attention v"].into_iter().enumerate() {
        check(name, &qkv[which], &|g, p| {
            let mut nodes = qkv.clone().map(|t| g.constant(t));
            nodes[which] = p;
            let y = g.masked_self_attention(nodes[0], nodes[1], nodes[2], &mask, 2)?;
            weighted_sum(g, y, 33)
        });
    }

    let x3 = random_tensor(&mut r, &[2, 3, 4]);
    check("mean_pool_masked", &x3, &|g, p| {
        let y = g.mean_pool_masked(p, &mask)?;
        weighted_sum(g, y, 34)
    });
    check("l2_normalize_rows", &x, &|g, p| {
        let y = g.l2_normalize_rows(p)?;
        weighted_sum(g, y, 35)
    });
    check("softmax_cross_entropy_rows", &x, &|g, p| g.softmax_cross_entropy_rows(p, &[0, 3, 1, 1, 2, 3]));

    let v_fixed = random_tensor(&mut r, &[5, 4]);
    let u0 = random_tensor(&mut r, &[5, 4]);
    for symmetric in [true, false] {
        let cfg = MnrlConfig { scale: 20.0, symmetric };
        let name = if symmetric { "mnrl symmetric" } else { "mnrl one-way" };
        check(name, &u0, &|g, p| {
            let un = g.l2_normalize_rows(p)?;
            let vc = g.constant(v_fixed.clone());
            let vn = g.l2_normalize_rows(vc)?;
            mnrl_loss(g, un, vn, &cfg)
        });
    }
    out
}

/// Worst relative error of central differences over every parameter of a
/// 1-layer, d=4 encoder on a B=2, T=3 batch pair under symmetric MNRL.
pub fn composed_gradient_error() -> f64 {
    let params = tiny_encoder(7, 4, 1, 2, 8, 9);
    let cfg = params.config().clone();
    let a = batch_from_ids(&[vec![2, 3, 4], vec![5, 6]], 3, 7).unwrap();
    let b = batch_from_ids(&[vec![6, 2], vec![3, 4, 5]], 3, 7).unwrap();
    let mnrl = MnrlConfig::default();
    let loss_of = |p: &EncoderParams| -> (f64, IndexMap<String, Vec<f64>>) {
        let mut g = Graph::new();
        let nodes = p.attach(&mut g, true);
        let u = forward(&mut g, &nodes, &cfg, &a, PoolingSource::LayerOutput).unwrap();
        let v = forward(&mut g, &nodes, &cfg, &b, PoolingSource::LayerOutput).unwrap();
        let l = mnrl_loss(&mut g, u, v, &mnrl).unwrap();
        let grads = g.backward(l).unwrap();
        let map = nodes
            .iter()
            .map(|(name, id)| (name.to_owned(), grads.get(id).map(<[f64]>::to_vec).unwrap_or_default()))
            .collect();
        (g.value(l).item(), map)
    };
    let (_, analytic) = loss_of(&params);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, tensor) in params.registry() {
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.registry_mut()[name].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.registry_mut()[name].data_mut()[i] -= h;
            let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let a = analytic[name].get(i).copied().unwrap_or(0.0);
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

/// `|loss - ln B|` for identical unit rows at each batch size.
pub fn mnrl_uniform_errors(sizes: &[usize]) -> Vec<(usize, f64)> {
    sizes
        .iter()
        .map(|&b| {
            let mut g = Graph::new();
            let rows = Tensor::new(vec![b, 3], [0.0, 0.6, 0.8].repeat(b)).unwrap();
            let u = g.constant(rows.clone());
            let v = g.constant(rows);
            let l = mnrl_loss(&mut g, u, v, &MnrlConfig::default()).unwrap();
            (b, (g.value(l).item() - (b as f64).ln()).abs())
        })
        .collect()
}

/// Worst deviation from the naive softmax oracle over random batches,
/// alternating symmetric and one-way losses.
pub fn mnrl_naive_error(trials: usize) -> f64 {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let b = r.gen_range(2..12);
        let d = r.gen_range(2..9);
        let u: Vec<Vec<f64>> = random_matrix(&mut r, b, d).iter().map(|x| unit(x)).collect();
        let v: Vec<Vec<f64>> = random_matrix(&mut r, b, d).iter().map(|x| unit(x)).collect();
        let symmetric = trial % 2 == 0;
        let cfg = MnrlConfig { scale: 20.0, symmetric };
        let mut g = Graph::new();
        let un = g.constant(Tensor::from_rows(&u).unwrap());
        let vn = g.constant(Tensor::from_rows(&v).unwrap());
        let l = mnrl_loss(&mut g, un, vn, &cfg).unwrap();
        worst = worst.max((g.value(l).item() - naive_mnrl(&u, &v, 20.0, symmetric)).abs());
    }
    worst
}

/// Max parameter deviation from the scalar Adam reference after `steps`
/// updates of a matrix (decayed) and a vector (not decayed).
pub fn adam_reference_error(steps: usize) -> f64 {
    let mut r = rng(7);
    let lr = 1e-3;
    let wd = 0.005;
    let matrix = random_tensor(&mut r, &[3, 4]);
    let vector = random_tensor(&mut r, &[4]);
    let mut params: IndexMap<String, Tensor> = IndexMap::new();
    params.insert("w".into(), matrix.clone());
    params.insert("b".into(), vector.clone());
    let mut adam = AdamState::new(AdamConfig {
        lr,
        weight_decay: wd,
        ..AdamConfig::default()
    });
    let mut refs: Vec<(f64, ScalarAdam)> = matrix
        .data()
        .iter()
        .map(|&x| (x, ScalarAdam::new(lr, wd)))
        .chain(vector.data().iter().map(|&x| (x, ScalarAdam::new(lr, 0.0))))
        .collect();
    for _ in 0..steps {
        let gw: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let gb: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        for ((theta, opt), &g) in refs.iter_mut().zip(gw.iter().chain(&gb)) {
            *theta = opt.update(*theta, g);
        }
        let grads: IndexMap<String, Vec<f64>> = [("w".to_owned(), gw), ("b".to_owned(), gb)].into_iter().collect();
        adam.step(&mut params, &grads).unwrap();
    }
    let got: Vec<f64> = params["w"].data().iter().chain(params["b"].data()).copied().collect();
    let expect: Vec<f64> = refs.iter().map(|(t, _)| *t).collect();
    max_abs_diff(&got, &expect)
}

/// Worst `| |Δθ| - lr·|g|/(|g|+eps) |` over a spread of gradient scales.
pub fn adam_first_step_error() -> f64 {
    let lr = 1e-3;
    let mut worst = 0.0f64;
    for &g in &[1e-9, 1e-4, 0.3, -7.0] {
        let mut params: IndexMap<String, Tensor> = IndexMap::new();
        params.insert("p".into(), Tensor::full(vec![1], 1.0));
        let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() });
        let grads: IndexMap<String, Vec<f64>> = [("p".to_owned(), vec![g])].into_iter().collect();
        adam.step(&mut params, &grads).unwrap();
        let moved = (params["p"].data()[0] - 1.0).abs();
        worst = worst.max((moved - lr * g.abs() / (g.abs() + 1e-8)).abs());
    }
    worst
}

/// Component (up to sign) and variance-ratio deviation from the Jacobi
/// oracle for one matrix.
pub fn pca_oracle_error(x: &[Vec<f64>], k: usize) -> f64 {
    let result = pca_project(x, k).unwrap();
    let (values, vectors) = jacobi_eigen(&sample_covariance(x));
    let total: f64 = values.iter().sum();
    let mut worst = 0.0f64;
    for c in 0..k {
        let got = &result.components[c];
        let dot: f64 = got.iter().zip(&vectors[c]).map(|(a, b)| a * b).sum();
        let flipped: Vec<f64> = vectors[c].iter().map(|v| v * dot.signum()).collect();
        worst = worst
            .max(max_abs_diff(got, &flipped))
            .max((result.explained_variance_ratio[c] - values[c] / total).abs());
    }
    worst
}

/// Worst oracle error over `n` random 10x8 matrices at k=2, plus a
/// full-rank 30x6 decomposition.
pub fn pca_random_error(n: usize) -> f64 {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..n {
        worst = worst.max(pca_oracle_error(&random_matrix(&mut r, 10, 8), 2));
    }
    worst.max(pca_oracle_error(&random_matrix(&mut r, 30, 6), 6))
}

/// Rank-2 data in 512 dims: `(|Σ ratio - 1|, output widths all 2)`.
pub fn pca_rank_two() -> (f64, bool) {
    let mut r = rng(9);
    let basis = random_matrix(&mut r, 2, 512);
    let x: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let (a, b) = (r.gen_range(-3.0..3.0), r.gen_range(-1.0..1.0));
            (0..512).map(|j| 0.5 + a * basis[0][j] + b * basis[1][j]).collect()
        })
        .collect();
    let result = pca_project(&x, 2).unwrap();
    let sum: f64 = result.explained_variance_ratio.iter().sum();
    let widths = result.coordinates.len() == 40 && result.coordinates.iter().all(|c| c.len() == 2);
    ((sum - 1.0).abs(), widths)
}
