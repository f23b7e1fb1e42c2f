//! PCA by power iteration with deflation on the sample covariance.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// `[n, k]` projected coordinates.
    pub coordinates: Vec<Vec<f64>>,
    /// `[k, d]` orthonormal principal directions.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalue of each component.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub total_variance: f64,
    pub mean: Vec<f64>,
}

impl PcaResult {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// `index,x,y,...` rows for external plotting.
    pub fn save_coordinates_csv(&self, path: &Path) -> Result<()> {
        let axes = ["x", "y", "z"];
        let k = self.components.len();
        let mut header = vec!["index".to_owned()];
        header.extend((0..k).map(|i| axes.get(i).map_or(format!("pc{i}"), |s| (*s).to_owned())));
        let mut out = Vec::new();
        writeln!(out, "{}", header.join(",")).expect("write to Vec");
        for (i, row) in self.coordinates.iter().enumerate() {
            write!(out, "{i}").expect("write to Vec");
            for v in row {
                write!(out, ",{v}").expect("write to Vec");
            }
            writeln!(out).expect("write to Vec");
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Classical Gram-Schmidt applied twice, which keeps `v` orthogonal to the
/// basis even when most of it cancels.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let p = dot(v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
    }
}

pub fn pca_project(x: &[Vec<f64>], k: usize) -> Result<PcaResult> {
    pca_project_seeded(x, k, 0)
}

/// Top-`k` principal components of the rows of `x`. Each component's first
/// entry with magnitude above 1e-12 is made positive.
pub fn pca_project_seeded(x: &[Vec<f64>], k: usize, seed: u64) -> Result<PcaResult> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData("PCA needs at least two rows".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidConfig("PCA rows must share a positive width".into()));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::InvalidConfig(format!(
            "cannot extract {k} components from {n}×{d} data"
        )));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }

    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            let ri = r[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ri * r[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if !(total > 0.0) {
        return Err(Error::ZeroVariance);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let tol = PCA_TOLERANCE * total;
    for _ in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        let mut lambda = 0.0;
        let mut converged = false;
        let mut residual = f64::INFINITY;
        for _ in 0..PCA_MAX_ITERS {
            let mut w: Vec<f64> = (0..d).map(|i| dot(&cov[i * d..(i + 1) * d], &v)).collect();
            orthogonalize(&mut w, &components);
            lambda = dot(&v, &w);
            residual = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if dot(&w, &w).sqrt() <= tol {
                // v lies in the null space of the deflated covariance
                lambda = 0.0;
                converged = true;
                break;
            }
            normalize(&mut w);
            v = w;
            if residual <= tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                iterations: PCA_MAX_ITERS,
                residual,
            });
        }
        orthogonalize(&mut v, &components);
        normalize(&mut v);
        if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|c| *c = -*c);
            }
        }
        // deflate: C ← C − λ v vᵀ
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda.max(0.0));
        components.push(v);
    }

    let coordinates = centered
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(PcaResult {
        coordinates,
        explained_variance_ratio: eigenvalues.iter().map(|l| l / total).collect(),
        explained_variance: eigenvalues,
        components,
        total_variance: total,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_point_is_zero_variance() {
        let x = vec![vec![1.0, 2.0, 3.0]; 5];
        assert!(matches!(pca_project(&x, 2), Err(Error::ZeroVariance)));
    }

    #[test]
    fn axis_aligned_data() {
        let x = vec![
            vec![2.0, 0.0, 0.0],
            vec![-2.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, -1.0, 0.0],
        ];
        let r = pca_project(&x, 2).unwrap();
        assert!((r.components[0][0] - 1.0).abs() < 1e-9);
        assert!((r.components[1][1] - 1.0).abs() < 1e-9);
        assert!((r.explained_variance_ratio[0] - 0.8).abs() < 1e-9);
        assert!((r.explained_variance_ratio[1] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_k() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(pca_project(&x, 3).is_err());
        assert!(pca_project(&x, 0).is_err());
        assert!(pca_project(&x[..1], 1).is_err());
    }

    #[test]
    fn rank_one_data_second_component_is_zero() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let r = pca_project(&x, 2).unwrap();
        assert!((r.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        assert!(r.explained_variance_ratio[1].abs() < 1e-9);
        assert!(dot(&r.components[0], &r.components[1]).abs() < 1e-9);
    }

    #[test]
    fn coordinates_csv_header() {
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let r = pca_project(&x, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        r.save_coordinates_csv(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("index,x,y\n0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
