//! Principal component analysis via a cyclic Jacobi eigendecomposition.
//!
//! Computation runs in f64 for accuracy. When there are fewer samples than
//! features the Gram-matrix route recovers the same nonzero eigenpairs from
//! an n x n problem instead of d x d.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;

#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, sorted by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component (covariance eigenvalues).
    pub variances: Vec<f64>,
    /// Fraction of total variance each component explains.
    pub explained_ratio: Vec<f64>,
}

impl PcaFit {
    /// Coefficients of `x` (centered internally) on the selected components.
    pub fn project(&self, x: &[f64], selected: &[usize]) -> Vec<f64> {
        selected
            .iter()
            .map(|&k| {
                self.components[k]
                    .iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(&v, (&xi, &mu))| v * (xi - mu))
                    .sum()
            })
            .collect()
    }

    /// mean + sum_k coeff_k * component_k
    pub fn reconstruct(&self, coeffs: &[f64], selected: &[usize]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (&k, &c) in selected.iter().zip(coeffs) {
            for (o, &v) in out.iter_mut().zip(&self.components[k]) {
                *o += c * v;
            }
        }
        out
    }
}

/// Fits PCA on `rows` (n samples by d features).
pub fn fit(rows: &[Vec<f64>]) -> Result<PcaFit> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca needs at least 2 samples, got {n}"
        )));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("pca rows must share a positive width".into()));
    }

    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
        .collect();

    let denom = (n - 1) as f64;
    let total_var: f64 = centered
        .iter()
        .flat_map(|r| r.iter().map(|&v| v * v))
        .sum::<f64>()
        / denom;
    if total_var <= 0.0 {
        return Err(Error::InvalidArgument("pca input has zero variance".into()));
    }

    let (mut eigvals, mut components): (Vec<f64>, Vec<Vec<f64>>) = if d <= n {
        let mut cov = vec![0.0f64; d * d];
        for r in &centered {
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += r[i] * r[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= denom;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        let (vals, vecs) = jacobi_eigen(cov, d);
        (vals, vecs)
    } else {
        // Gram trick: eigenpairs of X X^T map to covariance eigenpairs.
        let mut gram = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(&a, &b)| a * b).sum();
                gram[i * n + j] = dot;
                gram[j * n + i] = dot;
            }
        }
        let (vals, vecs) = jacobi_eigen(gram, n);
        let mut comp = Vec::new();
        let mut lam = Vec::new();
        for (sigma, u) in vals.into_iter().zip(vecs) {
            if sigma <= 0.0 {
                continue;
            }
            let mut v = vec![0.0f64; d];
            for (i, &ui) in u.iter().enumerate() {
                for (vk, &ck) in v.iter_mut().zip(&centered[i]) {
                    *vk += ui * ck;
                }
            }
            let norm = fmath::sqrt64(v.iter().map(|&x| x * x).sum());
            if norm <= 0.0 {
                continue;
            }
            for vk in &mut v {
                *vk /= norm;
            }
            comp.push(v);
            lam.push(sigma / denom);
        }
        (lam, comp)
    };

    // Drop numerically-null directions, sort descending.
    let cutoff = total_var * 1e-12;
    let mut order: Vec<usize> = (0..eigvals.len()).filter(|&i| eigvals[i] > cutoff).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let variances: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();
    let comps: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| core::mem::take(&mut components[i]))
        .collect();
    eigvals.clear();
    let explained_ratio: Vec<f64> = variances.iter().map(|&v| v / total_var).collect();

    Ok(PcaFit { mean, components: comps, variances, explained_ratio })
}

/// Cyclic Jacobi for a symmetric matrix (row-major, size s x s).
/// Returns unsorted (eigenvalues, eigenvectors-as-rows).
fn jacobi_eigen(mut a: Vec<f64>, s: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut v = vec![0.0f64; s * s];
    for i in 0..s {
        v[i * s + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|&x| x * x).sum::<f64>();
    let tol = frob.max(f64::MIN_POSITIVE) * 1e-28;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..s {
            for q in (p + 1)..s {
                off += a[p * s + q] * a[p * s + q];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..s {
            for q in (p + 1)..s {
                let apq = a[p * s + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * s + p];
                let aqq = a[q * s + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + fmath::sqrt64(theta * theta + 1.0))
                };
                let c = 1.0 / fmath::sqrt64(t * t + 1.0);
                let sn = t * c;
                for k in 0..s {
                    let akp = a[k * s + p];
                    let akq = a[k * s + q];
                    a[k * s + p] = c * akp - sn * akq;
                    a[k * s + q] = sn * akp + c * akq;
                }
                for k in 0..s {
                    let apk = a[p * s + k];
                    let aqk = a[q * s + k];
                    a[p * s + k] = c * apk - sn * aqk;
                    a[q * s + k] = sn * apk + c * aqk;
                }
                for k in 0..s {
                    let vkp = v[p * s + k];
                    let vkq = v[q * s + k];
                    v[p * s + k] = c * vkp - sn * vkq;
                    v[q * s + k] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let vals: Vec<f64> = (0..s).map(|i| a[i * s + i]).collect();
    let vecs: Vec<Vec<f64>> = (0..s).map(|i| v[i * s..(i + 1) * s].to_vec()).collect();
    (vals, vecs)
}
