//! Independent reference computations for the integration tests. Nothing here
//! calls into the library's numerical kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use specprune::linalg::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn vec_of(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `A Aᵀ / k + shift·I` for a Gaussian `m × k` matrix `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, m: usize, shift: f64) -> Matrix {
    let k = m + 4;
    let a = gaussian(rng, m, k);
    Matrix::from_fn(m, m, |i, j| {
        let s: f64 = (0..k).map(|t| a[(i, t)] * a[(j, t)]).sum::<f64>() / k as f64;
        s + if i == j { shift } else { 0.0 }
    })
}

/// Samples with correlated, unevenly scaled columns.
pub fn correlated_samples(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    let mix = gaussian(rng, m, m);
    let scales: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..3.0)).collect();
    let z = gaussian(rng, n, m);
    Matrix::from_fn(n, m, |r, c| (0..m).map(|t| z[(r, t)] * mix[(t, c)]).sum::<f64>() * scales[c])
}

/// `(1/n) ΦᵀΦ` by explicit triple loop.
pub fn second_moment(phi: &Matrix) -> Matrix {
    let (n, m) = (phi.rows(), phi.cols());
    Matrix::from_fn(m, m, |i, j| (0..n).map(|r| phi[(r, i)] * phi[(r, j)]).sum::<f64>() / n as f64)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|t| a[(i, t)] * b[(t, j)]).sum())
}

pub fn transpose(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.cols(), a.rows(), |i, j| a[(j, i)])
}

pub fn frob(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    let k = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)]).chain((0..k).map(|j| b[(i, j)])).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs())).unwrap();
        aug.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = aug[row][col] / aug[col][col];
                if f != 0.0 {
                    for c in col..n + k {
                        aug[row][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    Matrix::from_fn(n, k, |i, j| aug[i][n + j] / aug[i][i])
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn sym_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Singular values of `a` from the eigenvalues of its smaller Gram matrix.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let g = if a.rows() <= a.cols() { matmul(a, &transpose(a)) } else { matmul(&transpose(a), a) };
    sym_eigenvalues(&g).into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

/// Retention ratio straight from the definition, with an explicit solve.
pub fn ratio_direct(sigma: &Matrix, j: &[usize]) -> f64 {
    if j.is_empty() {
        return 0.0;
    }
    let m = sigma.rows();
    let sjj = Matrix::from_fn(j.len(), j.len(), |a, b| sigma[(j[a], j[b])]);
    let sjf = Matrix::from_fn(j.len(), m, |a, b| sigma[(j[a], b)]);
    let x = gauss_solve(&sjj, &sjf);
    let num: f64 = (0..m).map(|f| (0..j.len()).map(|a| sigma[(f, j[a])] * x[(a, f)]).sum::<f64>()).sum();
    let tr: f64 = (0..m).map(|i| sigma[(i, i)]).sum();
    num / tr
}

/// All subsets of `0..m` with exactly `k` elements, in lexicographic order.
pub fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn std_pop(v: &[f64]) -> f64 {
    let mu = mean(v);
    (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
