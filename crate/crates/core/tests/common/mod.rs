//! Shared test oracles, independent of the library's computation paths:
//! a two-sided Jacobi eigenvalue solver (the library uses Cholesky for
//! log-determinants and one-sided rotations for the SVD), central finite
//! differences, and deterministic random matrix helpers.
#![allow(dead_code)] // each test target uses a different subset

use cdl_mvp::linalg::DenseMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Mat = DenseMatrix<f64>;

/// Eigenvalues of a symmetric matrix by classical two-sided Jacobi
/// rotations, sorted descending.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut m = a.clone();
    let frob = m.frobenius_norm().max(1.0);
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= 1e-15 * frob {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-18 * frob {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // Similarity rotation on rows and columns p, q.
                for i in 0..n {
                    let mip = m.get(i, p);
                    let miq = m.get(i, q);
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for i in 0..n {
                    let mpi = m.get(p, i);
                    let mqi = m.get(q, i);
                    m.set(p, i, c * mpi - s * mqi);
                    m.set(q, i, s * mpi + c * mqi);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    eig
}

/// Independent coding-rate oracle: `1/2 Σ log(1 + α λ_i(Z Z^T))` with the
/// eigenvalues from the Jacobi solver above.
pub fn rate_by_eigenvalues(z: &Mat, epsilon_sq: f64) -> f64 {
    let d = z.rows();
    let m = z.cols();
    let alpha = d as f64 / (m as f64 * epsilon_sq);
    let gram = z.gram();
    symmetric_eigenvalues(&gram)
        .iter()
        .map(|&l| (1.0 + alpha * l.max(0.0)).ln())
        .sum::<f64>()
        * 0.5
}

/// Class-conditional rate oracle over hard labels.
pub fn class_rate_by_eigenvalues(z: &Mat, labels: &[usize], k: usize, epsilon_sq: f64) -> f64 {
    let d = z.rows();
    let m = z.cols();
    let mut total = 0.0;
    for class in 0..k {
        let idx: Vec<usize> = (0..m).filter(|&j| labels[j] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let zk = z.select_columns(&idx);
        let alpha_k = d as f64 / (idx.len() as f64 * epsilon_sq);
        let gram = zk.gram();
        let sum: f64 = symmetric_eigenvalues(&gram)
            .iter()
            .map(|&l| (1.0 + alpha_k * l.max(0.0)).ln())
            .sum();
        total += idx.len() as f64 / (2.0 * m as f64) * sum;
    }
    total
}

/// Central finite differences of a scalar function over matrix entries.
pub fn finite_difference_gradient(z: &Mat, h: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut grad = Mat::zeros(z.rows(), z.cols());
    for c in 0..z.cols() {
        for r in 0..z.rows() {
            let mut plus = z.clone();
            plus.set(r, c, z.get(r, c) + h);
            let mut minus = z.clone();
            minus.set(r, c, z.get(r, c) - h);
            grad.set(r, c, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    grad
}

/// Max-norm error of `got` against `want`, relative to max(1, |want|∞).
pub fn relative_max_error(got: &Mat, want: &Mat) -> f64 {
    let diff = got.add_scaled(want, -1.0).unwrap();
    diff.max_abs() / want.max_abs().max(1.0)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random unit-column feature matrix.
pub fn random_features(rng: &mut ChaCha8Rng, d: usize, m: usize) -> cdl_mvp::Features {
    cdl_mvp::Features::from_normalized(&gaussian_matrix(rng, d, m))
}

/// Random labels covering [0, k).
pub fn random_labels(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..k)).collect()
}
