//! Activation catalogue, normalisation constants, dual functions and Hermite
//! expansions.
//!
//! Each activation carries a *profile* function: the one whose Gaussian
//! moments define `c_phi`, `kappa` and the Hermite coefficients. For
//! asymptotically homogeneous kinds of positive degree that is the limit
//! function (ReLU for gelu and swish); for the saturating kinds (tanh,
//! sigmoid) the limit is a step function, so the activation itself is used.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::numerics::{
    bivariate_gaussian_expect, bivariate_gaussian_expect_graded, bivariate_gaussian_expect_split,
    clamp_rho, gauss_hermite, gaussian_expect, gaussian_expect_graded, gaussian_expect_split,
    QuadratureRule,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "param")]
pub enum ActivationName {
    Relu,
    LeakyRelu(f64),
    Prelu(f64),
    Gelu,
    Swish(f64),
    Tanh,
    Sigmoid,
    Identity,
}

impl ActivationName {
    /// Parse `relu`, `leaky_relu:0.01`, `prelu:0.2`, `gelu`, `swish:1`, `tanh`,
    /// `sigmoid`, `identity`.
    pub fn parse(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let num = |default: Option<f64>| -> Result<f64> {
            match arg {
                Some(a) => a.parse::<f64>().map_err(|_| Error::Config(format!("bad activation parameter '{a}'"))),
                None => default.ok_or_else(|| Error::Config(format!("activation '{head}' needs a parameter"))),
            }
        };
        let name = match head.to_ascii_lowercase().replace('-', "_").as_str() {
            "relu" => ActivationName::Relu,
            "leaky_relu" | "leaky" => ActivationName::LeakyRelu(num(Some(0.01))?),
            "prelu" => ActivationName::Prelu(num(Some(0.25))?),
            "gelu" => ActivationName::Gelu,
            "swish" | "silu" => ActivationName::Swish(num(Some(1.0))?),
            "tanh" => ActivationName::Tanh,
            "sigmoid" => ActivationName::Sigmoid,
            "identity" | "linear" => ActivationName::Identity,
            other => return Err(Error::Config(format!("unknown activation '{other}'"))),
        };
        if arg.is_some() && matches!(name, ActivationName::Relu | ActivationName::Gelu | ActivationName::Tanh | ActivationName::Sigmoid | ActivationName::Identity) {
            return Err(Error::Config(format!("activation '{head}' takes no parameter")));
        }
        Ok(name)
    }

    pub fn label(&self) -> String {
        match self {
            ActivationName::Relu => "relu".into(),
            ActivationName::LeakyRelu(a) => format!("leaky_relu:{a}"),
            ActivationName::Prelu(a) => format!("prelu:{a}"),
            ActivationName::Gelu => "gelu".into(),
            ActivationName::Swish(b) => format!("swish:{b}"),
            ActivationName::Tanh => "tanh".into(),
            ActivationName::Sigmoid => "sigmoid".into(),
            ActivationName::Identity => "identity".into(),
        }
    }
}

/// An activation with its homogeneity degree and cached `c_phi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ActivationName", into = "ActivationName")]
pub struct ActivationKind {
    name: ActivationName,
    degree: f64,
    c_phi: f64,
}

impl TryFrom<ActivationName> for ActivationKind {
    type Error = Error;
    fn try_from(name: ActivationName) -> Result<Self> {
        ActivationKind::new(name)
    }
}

impl From<ActivationKind> for ActivationName {
    fn from(k: ActivationKind) -> Self {
        k.name
    }
}

pub const KAPPA_ORDER: usize = 128;
/// Largest pre-activation standard deviation handled by the tensor
/// Gauss–Hermite rule; beyond it smooth activations look kinked at 0.
const TENSOR_SCALE_LIMIT: f64 = 1.5;
const GRADED_ORDER: usize = 10;
const GRADED_LEVELS: usize = 8;
pub const HERMITE_MAX_ORDER: usize = 60;

fn gh128() -> &'static QuadratureRule {
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(KAPPA_ORDER).expect("order 128 is in range"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / (2.0 * PI).sqrt()
}

/// `E[relu(u) relu(v)]` for unit Gaussians with correlation `rho`.
fn relu_cross(rho: f64) -> f64 {
    let theta = rho.acos();
    ((1.0 - rho * rho).max(0.0).sqrt() + rho * (PI - theta)) / (2.0 * PI)
}

/// `P(u > 0, v > 0)`.
fn orthant(rho: f64) -> f64 {
    (PI - rho.acos()) / (2.0 * PI)
}

impl ActivationKind {
    pub fn new(name: ActivationName) -> Result<Self> {
        let degree = match name {
            ActivationName::LeakyRelu(a) | ActivationName::Prelu(a) => {
                if !(0.0..1.0).contains(&a) {
                    return Err(Error::InvalidArch(format!("slope {a} outside [0, 1)")));
                }
                1.0
            }
            ActivationName::Swish(b) => {
                if !(b > 0.0 && b.is_finite()) {
                    return Err(Error::InvalidArch(format!("swish beta {b} must be positive")));
                }
                1.0
            }
            ActivationName::Tanh | ActivationName::Sigmoid => 0.0,
            _ => 1.0,
        };
        let mut kind = Self { name, degree, c_phi: 1.0 };
        let second = gaussian_expect(|x| kind.profile(x).powi(2), gh128());
        if !(second >= 1e-14) {
            return Err(Error::DegenerateActivation(second));
        }
        kind.c_phi = 1.0 / second;
        Ok(kind)
    }

    pub fn relu() -> Self {
        Self::new(ActivationName::Relu).expect("relu is valid")
    }

    pub fn name(&self) -> ActivationName {
        self.name
    }

    pub fn homogeneity_degree(&self) -> f64 {
        self.degree
    }

    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    /// Positively homogeneous at every scale, not just asymptotically.
    pub fn is_exactly_homogeneous(&self) -> bool {
        matches!(
            self.name,
            ActivationName::Relu | ActivationName::LeakyRelu(_) | ActivationName::Prelu(_) | ActivationName::Identity
        )
    }

    /// Piecewise linear with a break at zero.
    fn is_relu_family(&self) -> bool {
        matches!(self.name, ActivationName::Relu | ActivationName::LeakyRelu(_) | ActivationName::Prelu(_))
    }

    fn slope(&self) -> f64 {
        match self.name {
            ActivationName::LeakyRelu(a) | ActivationName::Prelu(a) => a,
            _ => 0.0,
        }
    }

    pub fn phi(&self, x: f64) -> f64 {
        match self.name {
            ActivationName::Relu => x.max(0.0),
            ActivationName::LeakyRelu(a) | ActivationName::Prelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            ActivationName::Gelu => x * norm_cdf(x),
            ActivationName::Swish(b) => x * sigmoid(b * x),
            ActivationName::Tanh => libm::tanh(x),
            ActivationName::Sigmoid => sigmoid(x),
            ActivationName::Identity => x,
        }
    }

    /// Almost-everywhere derivative; kinks take the left slope.
    pub fn phi_dot(&self, x: f64) -> f64 {
        match self.name {
            ActivationName::Relu | ActivationName::LeakyRelu(_) | ActivationName::Prelu(_) => {
                if x > 0.0 {
                    1.0
                } else {
                    self.slope()
                }
            }
            ActivationName::Gelu => norm_cdf(x) + x * norm_pdf(x),
            ActivationName::Swish(b) => {
                let s = sigmoid(b * x);
                s + b * x * s * (1.0 - s)
            }
            ActivationName::Tanh => 1.0 - libm::tanh(x).powi(2),
            ActivationName::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationName::Identity => 1.0,
        }
    }

    /// The limit `phi(lambda x) / lambda^n` as `lambda -> inf`.
    pub fn phi_hat(&self, x: f64) -> f64 {
        match self.name {
            ActivationName::Gelu | ActivationName::Swish(_) => x.max(0.0),
            ActivationName::Tanh => x.signum() * f64::from(u8::from(x != 0.0)),
            ActivationName::Sigmoid => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    0.0
                } else {
                    0.5
                }
            }
            _ => self.phi(x),
        }
    }

    pub fn profile(&self, x: f64) -> f64 {
        match self.name {
            ActivationName::Tanh | ActivationName::Sigmoid => self.phi(x),
            _ => self.phi_hat(x),
        }
    }

    pub fn profile_dot(&self, x: f64) -> f64 {
        match self.name {
            ActivationName::Gelu | ActivationName::Swish(_) => f64::from(u8::from(x > 0.0)),
            _ => self.phi_dot(x),
        }
    }

    fn profile_is_smooth(&self) -> bool {
        matches!(self.name, ActivationName::Tanh | ActivationName::Sigmoid | ActivationName::Identity)
    }

    pub fn kappa(&self, rho: f64) -> Result<f64> {
        let rho = clamp_rho(rho)?;
        match self.name {
            ActivationName::Identity => Ok(rho),
            ActivationName::Tanh | ActivationName::Sigmoid => self.kappa_quadrature(rho),
            _ => {
                let a = self.slope();
                let cross = (1.0 + a * a) * relu_cross(rho) - 2.0 * a * relu_cross(-rho);
                Ok(self.c_phi * cross)
            }
        }
    }

    pub fn kappa_dot(&self, rho: f64) -> Result<f64> {
        let rho = clamp_rho(rho)?;
        match self.name {
            ActivationName::Identity => Ok(1.0),
            ActivationName::Tanh | ActivationName::Sigmoid => self.kappa_dot_quadrature(rho),
            _ => {
                let a = self.slope();
                let cross = (1.0 + a * a) * orthant(rho) + 2.0 * a * orthant(-rho);
                Ok(self.c_phi * cross)
            }
        }
    }

    /// `kappa` by numerical integration only, never a closed form.
    pub fn kappa_quadrature(&self, rho: f64) -> Result<f64> {
        let f = |u: f64, v: f64| self.profile(u) * self.profile(v);
        Ok(self.c_phi * self.expect_pair(f, rho)?)
    }

    pub fn kappa_dot_quadrature(&self, rho: f64) -> Result<f64> {
        let f = |u: f64, v: f64| self.profile_dot(u) * self.profile_dot(v);
        Ok(self.c_phi * self.expect_pair(f, rho)?)
    }

    fn expect_pair(&self, f: impl Fn(f64, f64) -> f64, rho: f64) -> Result<f64> {
        if self.profile_is_smooth() {
            bivariate_gaussian_expect(f, rho, gh128())
        } else {
            bivariate_gaussian_expect_split(f, rho, KAPPA_ORDER)
        }
    }

    /// `c_phi E[phi(u) phi(v)]` and `c_phi E[phi'(u) phi'(v)]` for a centred
    /// Gaussian pair with covariance `[[sxx, sxy], [sxy, syy]]`, evaluated on
    /// the activation itself rather than its profile.
    pub fn gaussian_pair_moments(&self, sxx: f64, sxy: f64, syy: f64) -> Result<(f64, f64)> {
        let (sx, sy) = (sxx.max(0.0).sqrt(), syy.max(0.0).sqrt());
        let rho = if sx > 0.0 && sy > 0.0 { (sxy / (sx * sy)).clamp(-1.0, 1.0) } else { 1.0 };
        let value = |u: f64, v: f64| self.phi(sx * u) * self.phi(sy * v);
        let deriv = |u: f64, v: f64| self.phi_dot(sx * u) * self.phi_dot(sy * v);
        if rho == 1.0 {
            // the pair is one Gaussian: use the same 1-D rule as the diagonal
            let ev = self.gaussian_expect_1d(|u| self.phi(sx * u) * self.phi(sy * u), sx.max(sy))?;
            let ed = self.gaussian_expect_1d(|u| self.phi_dot(sx * u) * self.phi_dot(sy * u), sx.max(sy))?;
            return Ok((self.c_phi * ev, self.c_phi * ed));
        }
        let (ev, ed) = if self.is_relu_family() {
            (
                bivariate_gaussian_expect_split(value, rho, KAPPA_ORDER)?,
                bivariate_gaussian_expect_split(deriv, rho, KAPPA_ORDER)?,
            )
        } else if sx.max(sy) <= TENSOR_SCALE_LIMIT {
            (bivariate_gaussian_expect(value, rho, gh128())?, bivariate_gaussian_expect(deriv, rho, gh128())?)
        } else {
            // large variances sharpen the activation into a near-kink at 0
            (
                bivariate_gaussian_expect_graded(value, rho, GRADED_ORDER, GRADED_LEVELS)?,
                bivariate_gaussian_expect_graded(deriv, rho, GRADED_ORDER, GRADED_LEVELS)?,
            )
        };
        Ok((self.c_phi * ev, self.c_phi * ed))
    }

    /// `E[phi(sqrt(s) u)²]` for `u ~ N(0, 1)`.
    pub fn gaussian_square_moment(&self, s: f64) -> Result<f64> {
        let sd = s.max(0.0).sqrt();
        self.gaussian_expect_1d(|u| self.phi(sd * u).powi(2), sd)
    }

    /// `E[f(u)]` for `u ~ N(0, 1)` where `f` involves this activation at
    /// pre-activation scale up to `sd`.
    fn gaussian_expect_1d(&self, f: impl Fn(f64) -> f64, sd: f64) -> Result<f64> {
        if self.is_relu_family() {
            gaussian_expect_split(f, 32)
        } else if sd > TENSOR_SCALE_LIMIT {
            gaussian_expect_graded(f, 2 * GRADED_ORDER, GRADED_LEVELS + 4)
        } else {
            Ok(gaussian_expect(f, gh128()))
        }
    }

    /// `phi(lambda x) / lambda^n` for each `lambda`.
    pub fn homogeneity_limit_check(&self, x: f64, lambdas: &[f64]) -> Vec<f64> {
        lambdas.iter().map(|l| self.phi(l * x) / l.powf(self.degree)).collect()
    }

    /// `phi'(lambda x) / lambda^(n-1)` for each `lambda`.
    pub fn homogeneity_limit_check_dot(&self, x: f64, lambdas: &[f64]) -> Vec<f64> {
        lambdas.iter().map(|l| self.phi_dot(l * x) / l.powf(self.degree - 1.0)).collect()
    }

    pub fn hermite_coeffs(&self, max_order: usize) -> Result<HermiteExpansion> {
        if max_order > HERMITE_MAX_ORDER {
            return Err(Error::OrderOutOfRange { order: max_order, min: 0, max: HERMITE_MAX_ORDER });
        }
        // normalised Hermite functions h_n = He_n / sqrt(n!) avoid factorials
        let mut normalised = Vec::with_capacity(max_order + 1);
        for n in 0..=max_order {
            let b = gaussian_expect_split(|x| self.profile(x) * normalised_hermite(n, x), 48)?;
            normalised.push(b);
        }
        let mut coeffs = Vec::with_capacity(max_order + 1);
        let mut sqrt_fact = 1.0f64;
        for (n, b) in normalised.iter().enumerate() {
            if n > 0 {
                sqrt_fact *= (n as f64).sqrt();
            }
            coeffs.push(b / sqrt_fact);
        }
        Ok(HermiteExpansion { coeffs, kappa_hat_1: 1.0 / self.c_phi })
    }
}

/// `He_n(x) / sqrt(n!)`.
fn normalised_hermite(n: usize, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let kf = k as f64;
        let next = (x * cur - kf.sqrt() * prev) / (kf + 1.0).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Probabilists' Hermite polynomial `He_n(x)`.
pub fn hermite_poly(n: usize, x: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for k in 0..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Coefficients of a profile function in the probabilists' Hermite basis.
///
/// `kappa_hat_1` is the full second moment `E[profile²]`, the limit of the
/// truncated sum `sum a_n² n!` (see [`HermiteExpansion::truncated_norm`]).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HermiteExpansion {
    pub coeffs: Vec<f64>,
    pub kappa_hat_1: f64,
}

impl HermiteExpansion {
    /// `a_n² n!` for each retained order.
    pub fn energies(&self) -> Vec<f64> {
        let mut sqrt_fact = 1.0f64;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(n, a)| {
                if n > 0 {
                    sqrt_fact *= (n as f64).sqrt();
                }
                (a * sqrt_fact).powi(2)
            })
            .collect()
    }

    pub fn truncated_norm(&self) -> f64 {
        self.energies().iter().sum()
    }

    pub fn kappa_series(&self, rho: f64) -> f64 {
        let mut power = 1.0;
        let mut total = 0.0;
        for e in self.energies() {
            total += e * power;
            power *= rho;
        }
        total / self.kappa_hat_1
    }
}

/// `E[He_n(x) He_m(y)]` for a standard pair with correlation `rho`.
pub fn hermite_cross_moment(n: usize, m: usize, rho: f64) -> Result<f64> {
    if n > 10 || m > 10 {
        return Err(Error::OrderOutOfRange { order: n.max(m), min: 0, max: 10 });
    }
    static RULE: OnceLock<QuadratureRule> = OnceLock::new();
    let rule = RULE.get_or_init(|| gauss_hermite(16).expect("order 16 is in range"));
    bivariate_gaussian_expect(|x, y| hermite_poly(n, x) * hermite_poly(m, y), rho, rule)
}

/// Every activation in the catalogue with representative parameters.
pub fn catalogue() -> Vec<ActivationKind> {
    [
        ActivationName::Relu,
        ActivationName::LeakyRelu(0.01),
        ActivationName::Prelu(0.25),
        ActivationName::Gelu,
        ActivationName::Swish(1.0),
        ActivationName::Tanh,
        ActivationName::Sigmoid,
        ActivationName::Identity,
    ]
    .into_iter()
    .map(|n| ActivationKind::new(n).expect("catalogue entries are valid"))
    .collect()
}
