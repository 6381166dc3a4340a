use super::matrix::Matrix;
use crate::error::{invalid, Result};

/// Lower-triangular Cholesky factor `l` with `a = l lᵀ`, or `None` when `a`
/// is not numerically positive definite.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    if !a.is_square() {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Solves `l lᵀ x = b` in place.
pub fn cholesky_solve(l: &Matrix, b: &mut [f64]) {
    let n = l.rows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a).ok_or_else(|| invalid("matrix is not positive definite"))?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        cholesky_solve(&l, &mut col);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv.symmetrize();
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_solve() {
        let a = Matrix::from_rows(&[[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]]).unwrap();
        let l = cholesky(&a).unwrap();
        let back = l.matmul_tr(&l).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-14);
        let mut b = vec![1.0, -2.0, 0.5];
        cholesky_solve(&l, &mut b);
        let r = a.matvec(&b).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-14 && (r[1] + 2.0).abs() < 1e-14 && (r[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(cholesky(&a).is_none());
        assert!(spd_inverse(&a).is_err());
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = Matrix::from_rows(&[[2.0, -1.0], [-1.0, 2.0]]).unwrap();
        let inv = spd_inverse(&a).unwrap();
        let id = a.matmul(&inv).unwrap();
        assert!(id.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-14);
    }
}
