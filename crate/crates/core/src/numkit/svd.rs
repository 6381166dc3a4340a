//! Singular value decomposition by one-sided Jacobi rotations, and the
//! pseudoinverse / least-squares routines built on it.

use super::matrix::{dot, Matrix};
use crate::error::{invalid, Error, Result};

/// Thin SVD `a = u · diag(s) · vᵀ` with `k = min(rows, cols)` singular
/// values sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

const MAX_SWEEPS: usize = 80;

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(invalid("svd of a matrix with non-finite entries"));
    }
    if a.rows() >= a.cols() {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.transpose())?;
        Ok(Svd { u: t.v, singular_values: t.singular_values, v: t.u })
    }
}

/// Hestenes one-sided Jacobi for `rows >= cols`. Columns of `a` are stored as
/// rows of `work` so that every rotation touches contiguous memory.
fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut work = a.transpose();
    let mut v = Matrix::identity(n);
    let eps = f64::EPSILON;
    // Columns below this norm are numerically zero; rotating them only
    // shuffles roundoff and can stall convergence.
    let negligible = (eps * a.frobenius_norm()).powi(2);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = work.row(p);
                    let cq = work.row(q);
                    (dot(cp, cp), dot(cq, cq), dot(cp, cq))
                };
                if gamma == 0.0 || alpha.min(beta) <= negligible || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut work, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: MAX_SWEEPS, last_iterate: Vec::new() });
    }

    // `v` holds the right singular vectors as rows at this point.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| dot(work.row(j), work.row(j)).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = Matrix::zeros(m, n);
    let mut vout = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        singular_values.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u[(i, k)] = work[(j, i)] / sigma;
            }
        }
        for i in 0..n {
            vout[(i, k)] = v[(j, i)];
        }
    }
    Ok(Svd { u, singular_values, v: vout })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Default truncation threshold: `max(rows, cols) · σ_max · u` with `u` the
/// unit roundoff.
pub fn default_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * (f64::EPSILON / 2.0)
}

/// Moore–Penrose pseudoinverse. Singular values at or below `tol` are
/// treated as zero; `tol = 0` selects [`default_tolerance`].
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(invalid("pseudoinverse of a matrix with non-finite entries"));
    }
    if !(tol >= 0.0) {
        return Err(invalid("pseudoinverse tolerance must be nonnegative"));
    }
    let (rows, cols) = m.shape();
    let d = svd(m)?;
    let sigma_max = d.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = if tol == 0.0 { default_tolerance(rows, cols, sigma_max) } else { tol };

    // pinv = V · diag(1/σ) · Uᵀ
    let k = d.singular_values.len();
    let mut vs = d.v.clone();
    for j in 0..k {
        let sigma = d.singular_values[j];
        let inv = if sigma > cutoff { 1.0 / sigma } else { 0.0 };
        for i in 0..cols {
            vs[(i, j)] *= inv;
        }
    }
    vs.matmul_tr(&d.u)
}

/// Minimum-norm minimizer of `‖v − M·w‖_F`, i.e. `M = V Wᵀ (W Wᵀ)†`.
///
/// Evaluated as `V · W†`, which is algebraically identical and never forms
/// `W Wᵀ` (whose condition number is the square of `W`'s).
pub fn lstsq_right(v: &Matrix, w: &Matrix) -> Result<Matrix> {
    lstsq_right_with_tol(v, w, 0.0)
}

pub fn lstsq_right_with_tol(v: &Matrix, w: &Matrix, tol: f64) -> Result<Matrix> {
    if v.cols() != w.cols() {
        return Err(invalid(format!(
            "lstsq_right needs matching snapshot counts, got {} and {}",
            v.cols(),
            w.cols()
        )));
    }
    v.matmul(&pinv(w, tol)?)
}
