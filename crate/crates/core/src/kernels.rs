//! Cosine similarity kernels and the log-determinant algebra behind LogDetMI.
//!
//! All kernel arithmetic is in `f64`. Square self-kernels are regularized with
//! `lambda * I` before factorization so that rank-deficient kernels (duplicate
//! points, zero gradients) remain positive definite.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default diagonal regularization for square self-kernels.
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Rows with norm below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

pub fn row_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().map(|r| r.norm()).collect()
}

/// Cosine similarity of every row of `u` against every row of `v`.
/// Zero-norm rows get similarity 0 with everything, themselves included.
pub fn cosine_kernel(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if u.ncols() != v.ncols() {
        return Err(Error::invalid(format!(
            "cosine kernel inner dimensions differ: {} vs {}",
            u.ncols(),
            v.ncols()
        )));
    }
    let nu = row_norms(u);
    let nv = row_norms(v);
    let mut k = u * v.transpose();
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            k[(i, j)] = if nu[i] < ZERO_NORM || nv[j] < ZERO_NORM {
                0.0
            } else {
                k[(i, j)] / (nu[i] * nv[j])
            };
        }
    }
    Ok(k)
}

pub fn regularize(mut k: DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    for i in 0..k.nrows().min(k.ncols()) {
        k[(i, i)] += lambda;
    }
    k
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::invalid(format!("cholesky of non-square {:?}", a.shape())));
        }
        let n = a.nrows();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NumericalDomain {
                    pivot: j,
                    message: format!("matrix is not positive definite (pivot value {diag:e})"),
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L X = B` in place by forward substitution.
    pub fn solve_lower(&self, b: &mut DMatrix<f64>) {
        let n = self.l.nrows();
        for col in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, col)];
                for k in 0..i {
                    s -= self.l[(i, k)] * b[(k, col)];
                }
                b[(i, col)] = s / self.l[(i, i)];
            }
        }
    }
}

pub fn log_det(k: &DMatrix<f64>) -> Result<f64> {
    if k.nrows() == 0 && k.ncols() == 0 {
        return Ok(0.0);
    }
    Ok(Cholesky::factor(k)?.log_det())
}

/// `log det S_A - log det(S_A - S_AQ S_Q^{-1} S_AQ^T)`.
///
/// `S_Q^{-1}` is applied through the Cholesky factor of `S_Q`: with
/// `W = L_Q^{-1} S_AQ^T` the correction term is `W^T W`.
pub fn logdetmi_eval(s_a: &DMatrix<f64>, s_q: &DMatrix<f64>, s_aq: &DMatrix<f64>) -> Result<f64> {
    let k = s_a.nrows();
    if k == 0 {
        return Ok(0.0);
    }
    if s_aq.shape() != (k, s_q.nrows()) || !s_a.is_square() || !s_q.is_square() {
        return Err(Error::invalid(format!(
            "shape mismatch: S_A {:?}, S_Q {:?}, S_AQ {:?}",
            s_a.shape(),
            s_q.shape(),
            s_aq.shape()
        )));
    }
    let lq = Cholesky::factor(s_q)?;
    let mut w = s_aq.transpose();
    lq.solve_lower(&mut w);
    let schur = s_a - w.transpose() * &w;
    let ld_a = log_det(s_a)?;
    let ld_schur = log_det(&schur).map_err(|e| match e {
        Error::NumericalDomain { pivot, message } => Error::NumericalDomain {
            pivot,
            message: format!("Schur complement: {message}; increase lambda"),
        },
        other => other,
    })?;
    Ok(ld_a - ld_schur)
}

/// Builds the three regularized kernels for candidate subset `a` of
/// `candidates` against all of `query`, then evaluates LogDetMI.
pub fn logdetmi_of_subset(candidates: &DMatrix<f64>, query: &DMatrix<f64>, a: &[usize], lambda: f64) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let sel = candidates.select_rows(a);
    let s_a = regularize(cosine_kernel(&sel, &sel)?, lambda);
    let s_q = regularize(cosine_kernel(query, query)?, lambda);
    let s_aq = cosine_kernel(&sel, query)?;
    logdetmi_eval(&s_a, &s_q, &s_aq)
}
