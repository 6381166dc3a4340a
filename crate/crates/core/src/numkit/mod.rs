//! Dense linear algebra kernels.

mod cholesky;
mod eig;
mod matrix;
mod qp;
mod svd;

pub use cholesky::{cholesky, cholesky_solve, spd_inverse};
pub use eig::{eigvals, modulus, Complex, MAX_EIG_DIM};
pub use matrix::{axpy, dot, gemm, norm2, Matrix};
pub use qp::{qp_solve, ActiveSetSolver, CumulativeBounds, QpProblem, QpSolution};
pub use svd::{default_tolerance, lstsq_right, lstsq_right_with_tol, pinv, svd, Svd};
