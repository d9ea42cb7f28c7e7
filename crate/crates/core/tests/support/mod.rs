//! Reference routines shared by integration tests, written independently of
//! the library code they check.

#![allow(dead_code)]

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix: eigenvalues
/// and the matrix whose columns are the eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut a = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in a.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (a[p][k], a[q][k]);
                    a[p][k] = c * pk - s * qk;
                    a[q][k] = s * pk + c * qk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// `V diag(sqrt(max(l, 0))) V^T` from the Jacobi decomposition.
pub fn sqrtm_oracle(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let (vals, vecs) = jacobi_eigen(m);
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum()).collect())
        .collect()
}

/// A deterministic symmetric positive semi-definite matrix `B B^T`. The
/// rows of `B` are samples of one shifted sine, so its rank is at most 2.
pub fn psd_matrix(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let b: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (((i * 7 + j * 13) as u64 + seed * 31) as f64 * 0.618).sin()).collect())
        .collect();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| b[i][k] * b[j][k]).sum()).collect()).collect()
}

/// [`psd_matrix`] plus `ridge * I`, the shape of a regularized covariance.
pub fn pd_matrix(n: usize, seed: u64, ridge: f64) -> Vec<Vec<f64>> {
    let mut m = psd_matrix(n, seed);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += ridge;
    }
    m
}
