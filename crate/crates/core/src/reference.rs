//! Dense single-process counterparts of the distributed trainer, for small
//! problems: the exact kernel machine, explicit Nyström reconstruction and
//! the linearized machine built from an eigendecomposition of W.

use crate::data::SparseVec;
use crate::error::{Error, Result};
use crate::kernel::{gaussian, KernelBlock};
use crate::linalg::Matrix;
use crate::objective::{BlockOracle, Loss};
use crate::tron::{minimize, TronConfig, TronTrace};

pub const DEFAULT_CUTOFF_REL: f64 = 1e-12;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
/// Row `k` of `vectors_t` is the eigenvector of `values[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors_t: Matrix,
}

/// Cyclic Jacobi. Intended for matrices up to a couple of thousand rows.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dimension { expected: n, got: a.cols() });
    }
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let floor = f64::MIN_POSITIVE.max(scale * f64::EPSILON * 1e-3);
    let mut new_p = vec![0.0; n];
    let mut new_q = vec![0.0; n];

    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq.abs() <= floor.max(1e-16 * (app * aqq).abs().sqrt()) {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                {
                    let (rp, rq) = (a.row(p), a.row(q));
                    for k in 0..n {
                        new_p[k] = c * rp[k] - s * rq[k];
                        new_q[k] = s * rp[k] + c * rq[k];
                    }
                }
                a.row_mut(p).copy_from_slice(&new_p);
                a.row_mut(q).copy_from_slice(&new_q);
                for k in 0..n {
                    a[(k, p)] = new_p[k];
                    a[(k, q)] = new_q[k];
                }
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                {
                    let (vp, vq) = (v.row(p), v.row(q));
                    for k in 0..n {
                        new_p[k] = c * vp[k] - s * vq[k];
                        new_q[k] = s * vp[k] + c * vq[k];
                    }
                }
                v.row_mut(p).copy_from_slice(&new_p);
                v.row_mut(q).copy_from_slice(&new_q);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors_t = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors_t.row_mut(k).copy_from_slice(v.row(i));
    }
    Ok(SymEigen { values, vectors_t })
}

/// Indices of eigenvalues kept by a relative cutoff on the largest magnitude.
fn kept(values: &[f64], cutoff_rel: f64) -> Vec<usize> {
    let top = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if top == 0.0 {
        return Vec::new();
    }
    (0..values.len()).filter(|&k| values[k].abs() > cutoff_rel * top).collect()
}

/// `U diag(1/lambda) U^T` over eigenvalues above `cutoff_rel * max|lambda|`.
pub fn pseudo_inverse(w: &Matrix, cutoff_rel: f64) -> Result<Matrix> {
    let eig = sym_eigen(w)?;
    let n = w.rows();
    let mut out = Matrix::zeros(n, n);
    for k in kept(&eig.values, cutoff_rel) {
        let u = eig.vectors_t.row(k);
        let inv = 1.0 / eig.values[k];
        for i in 0..n {
            let ui = inv * u[i];
            for (o, uj) in out.row_mut(i).iter_mut().zip(u) {
                *o += ui * uj;
            }
        }
    }
    Ok(out)
}

/// Gram matrix of `points` under the Gaussian kernel.
pub fn gram(points: &[SparseVec], sigma: f64) -> Matrix {
    cross_gram(points, points, sigma)
}

/// `rows x cols` matrix of kernel values.
pub fn cross_gram(rows: &[SparseVec], cols: &[SparseVec], sigma: f64) -> Matrix {
    Matrix::from_fn(rows.len(), cols.len(), |i, j| gaussian(&rows[i], &cols[j], sigma))
}

/// `C W^+ C^T`.
pub fn nystrom_reconstruct(c: &Matrix, w_plus: &Matrix) -> Matrix {
    c.matmul(w_plus).matmul(&c.transpose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxError {
    pub frobenius_rel: f64,
    pub spectral_rel: f64,
}

fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(sym_eigen(a)?.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
}

/// Relative Frobenius and spectral distances between symmetric `k` and
/// `k_tilde`.
pub fn approx_error(k: &Matrix, k_tilde: &Matrix) -> Result<ApproxError> {
    if k.rows() != k_tilde.rows() || k.cols() != k_tilde.cols() {
        return Err(Error::Dimension { expected: k.rows(), got: k_tilde.rows() });
    }
    let diff = k.sub(k_tilde);
    Ok(ApproxError {
        frobenius_rel: diff.frobenius_norm() / k.frobenius_norm(),
        spectral_rel: spectral_norm(&diff)? / spectral_norm(k)?,
    })
}

fn dense_block(c: Matrix, w_rows: Matrix, labels: &[f64]) -> Result<KernelBlock> {
    if c.rows() != labels.len() {
        return Err(Error::Dimension { expected: c.rows(), got: labels.len() });
    }
    Ok(KernelBlock {
        w_row_ids: (0..w_rows.rows()).collect(),
        c_evals: 0,
        w_evals: 0,
        c_block: c,
        w_rows,
        labels: labels.to_vec(),
    })
}

fn solve_block(block: KernelBlock, lambda: f64, loss: Loss, cfg: &TronConfig) -> Result<(Vec<f64>, f64, TronTrace)> {
    let blocks = [block];
    let mut oracle = BlockOracle::new(&blocks, lambda, loss)?;
    let (x, trace) = minimize(&mut oracle, &vec![0.0; blocks[0].m()], cfg)?;
    let f = oracle.objective(&x)?;
    Ok((x, f, trace))
}

/// The linear machine on features `A = C U Lambda^{-1/2}`.
#[derive(Debug, Clone)]
pub struct LinearizedSolution {
    pub a: Matrix,
    /// `U Lambda^{-1/2}` over kept eigenvalues (`m x m_hat`).
    pub projection: Matrix,
    pub w: Vec<f64>,
    pub objective: f64,
    pub trace: TronTrace,
}

impl LinearizedSolution {
    pub fn rank(&self) -> usize {
        self.w.len()
    }

    /// Coefficients over the basis giving the same outputs as `w`.
    pub fn beta(&self) -> Vec<f64> {
        self.projection.matvec(&self.w)
    }
}

/// `U Lambda^{-1/2}` restricted to eigenvalues above the cutoff. Negative
/// eigenvalues that survive the cutoff are rejected.
pub fn whitening(w: &Matrix, cutoff_rel: f64) -> Result<Matrix> {
    let eig = sym_eigen(w)?;
    let keep = kept(&eig.values, cutoff_rel);
    if let Some(&k) = keep.iter().find(|&&k| eig.values[k] < 0.0) {
        return Err(Error::Numerical {
            msg: format!("W has a significant negative eigenvalue {}", eig.values[k]),
            iterate: Vec::new(),
        });
    }
    let m = w.rows();
    Ok(Matrix::from_fn(m, keep.len(), |i, j| {
        let k = keep[j];
        eig.vectors_t[(k, i)] / eig.values[k].sqrt()
    }))
}

/// Builds `A = C U Lambda^{-1/2}` and minimizes
/// `(lambda/2)||w||^2 + L(Aw, y)` with the trust-region solver.
pub fn solve_linearized(
    c: &Matrix,
    w: &Matrix,
    y: &[f64],
    lambda: f64,
    cutoff_rel: f64,
    loss: Loss,
    cfg: &TronConfig,
) -> Result<LinearizedSolution> {
    if c.cols() != w.rows() {
        return Err(Error::Dimension { expected: w.rows(), got: c.cols() });
    }
    let projection = whitening(w, cutoff_rel)?;
    let a = c.matmul(&projection);
    let block = dense_block(a.clone(), Matrix::identity(projection.cols()), y)?;
    let (w, objective, trace) = solve_block(block, lambda, loss, cfg)?;
    Ok(LinearizedSolution { a, projection, w, objective, trace })
}

/// Minimizes `(lambda/2) a^T K a + L(K a, y)`: the exact kernel machine.
pub fn solve_full_kernel(
    k: &Matrix,
    y: &[f64],
    lambda: f64,
    loss: Loss,
    cfg: &TronConfig,
) -> Result<(Vec<f64>, f64, TronTrace)> {
    if k.rows() != k.cols() {
        return Err(Error::Dimension { expected: k.rows(), got: k.cols() });
    }
    solve_block(dense_block(k.clone(), k.clone(), y)?, lambda, loss, cfg)
}

/// Same problem as the distributed trainer on a single dense block.
pub fn solve_nystrom(
    c: &Matrix,
    w: &Matrix,
    y: &[f64],
    lambda: f64,
    loss: Loss,
    cfg: &TronConfig,
) -> Result<(Vec<f64>, f64, TronTrace)> {
    if c.cols() != w.rows() {
        return Err(Error::Dimension { expected: w.rows(), got: c.cols() });
    }
    solve_block(dense_block(c.clone(), w.clone(), y)?, lambda, loss, cfg)
}
