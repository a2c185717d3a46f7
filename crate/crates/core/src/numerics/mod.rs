//! Dense linear algebra, Gaussian quadrature and seeded random streams.

mod linalg;
mod matrix;
mod quadrature;
mod rng;

pub use linalg::{cholesky, cholesky_solve, default_jitter, min_eigenvalue_sym, symmetric_eigenvalues};
pub use matrix::Matrix;
pub use quadrature::{
    bivariate_gaussian_expect, bivariate_gaussian_expect_graded, bivariate_gaussian_expect_split, gauss_hermite, gauss_legendre,
    gaussian_expect, gaussian_expect_graded, gaussian_expect_split, QuadratureRule,
};
pub use rng::{sample_normal, RngStream};

/// Clamp a correlation into [-1, 1], rejecting values beyond rounding slack.
pub fn clamp_rho(rho: f64) -> crate::Result<f64> {
    if !rho.is_finite() || rho.abs() > 1.0 + 1e-12 {
        return Err(crate::Error::RhoOutOfRange(rho));
    }
    Ok(rho.clamp(-1.0, 1.0))
}
