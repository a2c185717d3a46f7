//! Noiseless kernel regression with the analytic NTK: the mean prediction of
//! an infinitely wide network trained to convergence, plus worst-case output
//! bounds for layer-norm architectures.

use rayon::prelude::*;
use serde::Serialize;

use crate::analytic_ntk::{ntk, ntk_gram, variance_sup, ArchSpec};
use crate::numerics::{cholesky, cholesky_solve, default_jitter, min_eigenvalue_sym, sample_normal, Matrix, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
}

impl Dataset {
    /// Rejects empty data, length mismatches, non-finite values and repeated
    /// inputs.
    pub fn new(x: Matrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch { expected: x.rows(), got: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset targets".into()));
        }
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.sort_by(|&a, &b| {
            x.row(a).iter().zip(x.row(b)).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        for w in order.windows(2) {
            if x.row(w[0]) == x.row(w[1]) {
                let (i, j) = (w[0].min(w[1]), w[0].max(w[1]));
                return Err(Error::DuplicateInputs(i, j));
            }
        }
        Ok(Self { x, y })
    }

    /// One-dimensional inputs.
    pub fn from_1d(xs: &[f64], y: Vec<f64>) -> Result<Self> {
        Self::new(Matrix::new(xs.len(), 1, xs.to_vec())?, y)
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn max_abs_y(&self) -> f64 {
        self.y.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Same inputs, new targets.
    pub fn with_targets(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y)
    }
}

/// Inputs inside a cone around a random axis, every pair at cosine ≥ 0.5,
/// with alternating ±1 targets. Every pair of inputs then has positive
/// similarity, which is the setting where homogeneous networks without layer
/// norm extrapolate without bound.
pub fn witness_dataset(input_dim: usize, n: usize, stream: &RngStream) -> Result<Dataset> {
    if input_dim < 2 || n == 0 {
        return Err(Error::Config("witness dataset needs input_dim ≥ 2 and at least one point".into()));
    }
    let mut s = stream.clone();
    let axis = unit(sample_normal(&mut s, input_dim));
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        // an angle of at most 25° from the axis keeps every pair within 50°
        let mut w = sample_normal(&mut s, input_dim);
        let along = dot(&w, &axis);
        w.iter_mut().zip(&axis).for_each(|(wi, a)| *wi -= along * a);
        let w = unit(w);
        let u = sample_normal(&mut s, 2);
        let angle = 25f64.to_radians() * (0.5 + 0.5 * libm::tanh(u[0] / 3.0));
        let radius = 1.0 + 0.5 * libm::tanh(u[1] / 3.0);
        let (sn, cs) = libm::sincos(angle);
        rows.push(axis.iter().zip(&w).map(|(a, b)| radius * (cs * a + sn * b)).collect::<Vec<f64>>());
    }
    let y = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    Dataset::new(Matrix::from_rows(&rows)?, y)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    arch: ArchSpec,
    dataset: Dataset,
    gram: Matrix,
    chol: Matrix,
    alpha: Vec<f64>,
    lambda_min: f64,
    jitter: f64,
    variance_constant: f64,
}

/// Fit with the default jitter, `1e-10 · trace / n`.
pub fn fit_default(arch: &ArchSpec, dataset: &Dataset) -> Result<Predictor> {
    fit(arch, dataset, None)
}

/// Factorise the training Gram and solve for the dual weights.
///
/// The Gram must have `λ_min > 10 · jitter`, or the fit is reported as
/// degenerate. `variance_constant` is the supremum of `Θ(x, x)` when it is
/// finite, else `+∞`.
pub fn fit(arch: &ArchSpec, dataset: &Dataset, jitter: Option<f64>) -> Result<Predictor> {
    if dataset.input_dim() != arch.input_dim {
        return Err(Error::DimensionMismatch { expected: arch.input_dim, got: dataset.input_dim() });
    }
    let gram = ntk_gram(arch, dataset.x())?;
    let jitter = jitter.unwrap_or_else(|| default_jitter(&gram));
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Config(format!("jitter must be non-negative, got {jitter}")));
    }
    let lambda_min = min_eigenvalue_sym(&gram)?;
    if lambda_min <= 10.0 * jitter {
        return Err(Error::DegenerateGram { lambda_min, threshold: 10.0 * jitter });
    }
    let chol = cholesky(&gram, jitter)?;
    let alpha = cholesky_solve(&chol, dataset.y())?;
    let variance_constant = match variance_sup(arch) {
        Ok(c) => c,
        Err(Error::UnboundedKernel) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    Ok(Predictor {
        arch: arch.clone(),
        dataset: dataset.clone(),
        gram,
        chol,
        alpha,
        lambda_min,
        jitter,
        variance_constant,
    })
}

/// The worst-case bound formula as printed: `sqrt(C · max|y| / λ_min) · |D|`.
pub fn paper_bound_formula(c: f64, lambda_min: f64, max_abs_y: f64, n: usize) -> f64 {
    (c * max_abs_y / lambda_min).sqrt() * n as f64
}

/// The Cauchy–Schwarz chain `|m(x)| ≤ sqrt(Θ(x,x)) · sqrt(yᵀΘ⁻¹y)`, with
/// `yᵀΘ⁻¹y ≤ |D| max|y|² / λ_min` as the fallback.
pub fn rkhs_bound_formula(c: f64, y_alpha: f64, lambda_min: f64, max_abs_y: f64, n: usize) -> f64 {
    let tight = (c * y_alpha.max(0.0)).sqrt();
    let loose = (c * n as f64 / lambda_min).sqrt() * max_abs_y;
    tight.min(loose)
}

impl Predictor {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Supremum of `Θ(x, x)`; `+∞` when the kernel is unbounded.
    pub fn variance_constant(&self) -> f64 {
        self.variance_constant
    }

    /// `Θ(x, X_train)`.
    pub fn kernel_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: x.len() });
        }
        let xs = self.dataset.x();
        (0..xs.rows()).map(|i| ntk(&self.arch, x, xs.row(i))).collect()
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        Ok(dot(&self.kernel_vector(x)?, &self.alpha))
    }

    /// Means at every row of `xs`, in parallel.
    pub fn predict_many(&self, xs: &Matrix) -> Result<Vec<f64>> {
        (0..xs.rows()).into_par_iter().map(|i| self.predict_mean(xs.row(i))).collect()
    }

    fn finite_c(&self) -> Result<f64> {
        if self.variance_constant.is_finite() {
            Ok(self.variance_constant)
        } else {
            Err(Error::UnboundedKernel)
        }
    }

    pub fn bound_paper(&self) -> Result<f64> {
        Ok(paper_bound_formula(self.finite_c()?, self.lambda_min, self.dataset.max_abs_y(), self.dataset.len()))
    }

    pub fn bound_rkhs(&self) -> Result<f64> {
        let y_alpha = dot(self.dataset.y(), &self.alpha);
        Ok(rkhs_bound_formula(
            self.finite_c()?,
            y_alpha,
            self.lambda_min,
            self.dataset.max_abs_y(),
            self.dataset.len(),
        ))
    }

    /// Scan `|m(r · d̂)|` over every direction and norm.
    pub fn cross_norm_bound_check(&self, directions: &[Vec<f64>], norms: &[f64]) -> Result<BoundReport> {
        let c = self.finite_c()?;
        let limit = (self.dataset.len() as f64 * c).sqrt();
        let points: Vec<Vec<f64>> = directions
            .iter()
            .map(|d| {
                let n = dot(d, d).sqrt();
                if !(n > 0.0) {
                    return Err(Error::Config("scan direction must be non-zero".into()));
                }
                Ok(d.iter().map(|v| v / n).collect::<Vec<f64>>())
            })
            .collect::<Result<_>>()?;
        let grid: Vec<(usize, f64)> =
            (0..points.len()).flat_map(|i| norms.iter().map(move |&r| (i, r))).collect();
        let evals: Vec<(f64, f64)> = grid
            .par_iter()
            .map(|&(i, r)| {
                let x: Vec<f64> = points[i].iter().map(|v| v * r).collect();
                let k = self.kernel_vector(&x)?;
                Ok((dot(&k, &self.alpha), dot(&k, &k).sqrt()))
            })
            .collect::<Result<_>>()?;
        let max_abs_mean = evals.iter().fold(0.0f64, |m, e| m.max(e.0.abs()));
        let max_kernel_norm = evals.iter().fold(0.0f64, |m, e| m.max(e.1));
        let kernel_norm_violations = evals.iter().filter(|e| e.1 > limit + 1e-8).count();
        let cs_limit = c * (self.dataset.len() as f64).sqrt();
        let cauchy_schwarz_violations = evals.iter().filter(|e| e.1 > cs_limit * (1.0 + 1e-12) + 1e-8).count();
        let mut saturation_gap = 0.0f64;
        for d in &points {
            let far = |r: f64| self.predict_mean(&d.iter().map(|v| v * r).collect::<Vec<_>>());
            saturation_gap = saturation_gap.max((far(1e4)? - far(1e6)?).abs());
        }
        let bound_rkhs = self.bound_rkhs()?;
        Ok(BoundReport {
            points: evals.len(),
            max_abs_mean,
            bound_rkhs,
            bound_paper: self.bound_paper()?,
            max_kernel_norm,
            kernel_norm_limit: limit,
            kernel_norm_violations,
            cauchy_schwarz_limit: cs_limit,
            cauchy_schwarz_violations,
            saturation_gap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub points: usize,
    pub max_abs_mean: f64,
    pub bound_rkhs: f64,
    pub bound_paper: f64,
    pub max_kernel_norm: f64,
    /// `sqrt(|D| · C)`
    pub kernel_norm_limit: f64,
    /// Scan points with `‖Θ(x, X)‖ > sqrt(|D| C) + 1e-8`. This limit only
    /// follows from `|Θ(x, x′)| ≤ C` when `C ≤ 1`.
    pub kernel_norm_violations: usize,
    /// `C · sqrt(|D|)`, implied by `|Θ(x, x′)| ≤ sqrt(Θ(x, x) Θ(x′, x′)) ≤ C`.
    pub cauchy_schwarz_limit: f64,
    pub cauchy_schwarz_violations: usize,
    /// Largest `|m(1e4 d̂) − m(1e6 d̂)|` over the directions.
    pub saturation_gap: f64,
}

impl BoundReport {
    /// The mean stays under the RKHS bound and every kernel vector obeys
    /// the Cauchy–Schwarz limit.
    pub fn holds(&self) -> bool {
        self.max_abs_mean <= self.bound_rkhs && self.cauchy_schwarz_violations == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_examples() {
        assert_eq!(paper_bound_formula(1.0, 1.0, 1.0, 3), 3.0);
        assert_eq!(paper_bound_formula(1.0, 1.0, 4.0, 1), 2.0);
        assert_eq!(paper_bound_formula(2.0, 0.5, 16.0, 5), 2.0 * paper_bound_formula(2.0, 0.5, 4.0, 5));
        // single point with Θ(x0, x0) = 1 and y0 = 4: α = 4, yᵀα = 16
        assert_eq!(rkhs_bound_formula(1.0, 16.0, 1.0, 4.0, 1), 4.0);
        assert_eq!(rkhs_bound_formula(3.0, 0.0, 0.2, 0.0, 7), 0.0);
    }

    #[test]
    fn duplicates_are_reported() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(Dataset::new(x, vec![1.0, 2.0, 3.0]), Err(Error::DuplicateInputs(0, 2)));
    }

    #[test]
    fn witness_cone_has_positive_cosines() {
        let d = witness_dataset(4, 12, &RngStream::new(3, 0)).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let (a, b) = (d.x().row(i), d.x().row(j));
                let cos = dot(a, b) / (dot(a, a) * dot(b, b)).sqrt();
                assert!(cos >= 0.5);
            }
        }
        assert_eq!(d.max_abs_y(), 1.0);
    }
}
