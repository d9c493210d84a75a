//! Brute-force PCA oracle: cyclic Jacobi eigendecomposition of the full
//! `dim x dim` (co)variance matrix, compared against the Gram-matrix fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reglat::latent::{fit_pca_rows, PcaBasis};

/// Eigenvalues (descending) and eigenvectors (as rows) of a symmetric matrix.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&x, &y| a[y * n + y].total_cmp(&a[x * n + x]));
    let vals = idx.iter().map(|&i| a[i * n + i]).collect();
    let vecs = idx.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (vals, vecs)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_rows(seed: u64, n: usize, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dim).map(|_| rng.random_range(-1.0..1.0) + 0.3).collect()
}

#[derive(Debug, Default)]
pub struct OracleReport {
    pub max_eig_err: f64,
    pub max_evr_err: f64,
    pub max_component_err: f64,
    pub max_projection_err: f64,
    pub max_reconstruction_err: f64,
    pub max_orthonormality_err: f64,
    /// `relative residual - (1 - Σ evr)`; must be ≤ 1e-6.
    pub residual_gap: f64,
}

/// Fits `k` components of random `n x dim` rows and compares every output
/// with the oracle.
pub fn compare(seed: u64, n: usize, dim: usize, k: usize, center: bool) -> OracleReport {
    let x = random_rows(seed, n, dim);
    let basis: PcaBasis = fit_pca_rows(&x, n, dim, k, center, "oracle").unwrap();

    let mean: Vec<f64> = (0..dim)
        .map(|c| (0..n).map(|r| x[r * dim + c]).sum::<f64>() / n as f64)
        .collect();
    let xc: Vec<f64> = if center {
        (0..n * dim).map(|i| x[i] - mean[i % dim]).collect()
    } else {
        x.clone()
    };
    let mut cov = vec![0.0; dim * dim];
    for r in 0..n {
        let row = &xc[r * dim..(r + 1) * dim];
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += row[i] * row[j];
            }
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let (vals, mut vecs) = jacobi_eigen(&cov, dim);
    for u in vecs.iter_mut() {
        let piv = u
            .iter()
            .cloned()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if piv < 0.0 {
            u.iter_mut().for_each(|t| *t = -*t);
        }
    }

    let mut rep = OracleReport::default();
    let scale = vals[0];
    for j in 0..k {
        rep.max_eig_err = rep
            .max_eig_err
            .max((basis.singular_values[j].powi(2) - vals[j]).abs() / scale);
        rep.max_evr_err = rep.max_evr_err.max((basis.evr[j] - vals[j] / trace).abs());
        let u = basis.component(j + 1).unwrap();
        let e = u.iter().zip(&vecs[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rep.max_component_err = rep.max_component_err.max(e);
        for i in 0..k {
            let d = dot(u, basis.component(i + 1).unwrap()) - if i == j { 1.0 } else { 0.0 };
            rep.max_orthonormality_err = rep.max_orthonormality_err.max(d.abs());
        }
    }

    let mut resid = 0.0;
    let mut total = 0.0;
    for r in 0..n {
        let row = &x[r * dim..(r + 1) * dim];
        let rowc = &xc[r * dim..(r + 1) * dim];
        let a = basis.project(row).unwrap();
        let a_oracle: Vec<f64> = vecs[..k].iter().map(|u| dot(rowc, u)).collect();
        for (p, q) in a.iter().zip(&a_oracle) {
            rep.max_projection_err = rep.max_projection_err.max((p - q).abs());
        }
        let rec = basis.reconstruct(&a).unwrap();
        let mut rec_oracle: Vec<f64> = if center { mean.clone() } else { vec![0.0; dim] };
        for (aj, u) in a_oracle.iter().zip(&vecs) {
            rec_oracle.iter_mut().zip(u).for_each(|(t, &v)| *t += aj * v);
        }
        for (p, q) in rec.iter().zip(&rec_oracle) {
            rep.max_reconstruction_err = rep.max_reconstruction_err.max((p - q).abs());
        }
        resid += row.iter().zip(&rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        total += rowc.iter().map(|v| v * v).sum::<f64>();
    }
    let evr_sum: f64 = basis.evr.iter().sum();
    rep.residual_gap = resid / total - (1.0 - evr_sum);
    rep
}

pub fn passes(r: &OracleReport) -> bool {
    r.max_eig_err <= 1e-8
        && r.max_evr_err <= 1e-8
        && r.max_component_err <= 1e-8
        && r.max_projection_err <= 1e-8
        && r.max_reconstruction_err <= 1e-8
        && r.max_orthonormality_err <= 1e-6
        && r.residual_gap <= 1e-6
}
