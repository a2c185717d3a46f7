//! Exact infinite-width NNGP and NTK recursions for fully-connected networks
//! with optional layer norm.
//!
//! Layer indexing: `L = depth` hidden layers. `Σ⁽⁰⁾ = xᵀx′/n₀ + σ_b²` is the
//! covariance of the first linear output; `Σ⁽ʰ⁾` is the covariance of the
//! output of linear map `h+1`, and `Σ⁽ᴸ⁾` is the network output. A layer-norm
//! position `p ∈ {0..L-1}` normalises the output of linear map `p+1` before
//! its nonlinearity, so `p = 0` is "linear then LN" on the input.
//!
//! Kernel states are held as `exp(log_scale) * stored`, which keeps the
//! recursion finite for input norms far beyond what plain `f64` would allow.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, ActivationName};
use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub depth: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: ActivationKind,
    pub ln_positions: BTreeSet<usize>,
    pub sigma_b: f64,
}

pub const DEFAULT_WIDTH: usize = 512;

impl ArchSpec {
    pub fn new(input_dim: usize, depth: usize, activation: ActivationKind, sigma_b: f64) -> Result<Self> {
        if !(sigma_b > 0.0 && sigma_b.is_finite()) {
            return Err(Error::InvalidArch(format!("sigma_b must be positive, got {sigma_b}")));
        }
        let arch = Self {
            input_dim,
            depth,
            hidden_widths: vec![DEFAULT_WIDTH; depth],
            activation,
            ln_positions: BTreeSet::new(),
            sigma_b,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// An architecture without biases. Only meaningful for kernel identities
    /// in the bias-free limit; finite nets and predictors reject it.
    pub fn bias_free(input_dim: usize, depth: usize, activation: ActivationKind) -> Result<Self> {
        let arch = Self {
            input_dim,
            depth,
            hidden_widths: vec![DEFAULT_WIDTH; depth],
            activation,
            ln_positions: BTreeSet::new(),
            sigma_b: 0.0,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_width(mut self, width: usize) -> Result<Self> {
        self.hidden_widths = vec![width; self.depth];
        self.validate()?;
        Ok(self)
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Result<Self> {
        self.hidden_widths = widths;
        self.validate()?;
        Ok(self)
    }

    pub fn with_ln(mut self, positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.ln_positions = positions.into_iter().collect();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidArch("depth must be at least 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input dimension must be at least 1".into()));
        }
        if self.hidden_widths.len() != self.depth {
            return Err(Error::InvalidArch(format!(
                "{} hidden widths for depth {}",
                self.hidden_widths.len(),
                self.depth
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArch("hidden widths must be positive".into()));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return Err(Error::InvalidArch(format!("sigma_b must be non-negative, got {}", self.sigma_b)));
        }
        if let Some(p) = self.ln_positions.iter().find(|p| **p >= self.depth) {
            return Err(Error::InvalidArch(format!(
                "layer norm position {p} out of range 0..{} (the scalar output cannot be normalised)",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn has_ln(&self) -> bool {
        !self.ln_positions.is_empty()
    }

    pub fn sigma_b2(&self) -> f64 {
        self.sigma_b * self.sigma_b
    }

    /// Parse `none`, `first`, `last`, `mid`, `every` or a comma list of indices.
    pub fn parse_ln_positions(spec: &str, depth: usize) -> Result<BTreeSet<usize>> {
        let set: BTreeSet<usize> = match spec.trim() {
            "" | "none" => BTreeSet::new(),
            "first" => [0].into(),
            "last" => [depth.saturating_sub(1)].into(),
            "mid" => [depth / 2].into(),
            "every" | "all" => (0..depth).collect(),
            list => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad layer norm position '{t}'"))))
                .collect::<Result<_>>()?,
        };
        if let Some(p) = set.iter().find(|p| **p >= depth) {
            return Err(Error::Config(format!("layer norm position {p} out of range 0..{depth}")));
        }
        Ok(set)
    }
}

/// Running covariance triple and accumulated NTK terms for one input pair.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelState {
    pub h: usize,
    log_scale: f64,
    a: f64,
    b: f64,
    c: f64,
    terms: Vec<f64>,
    log_ln_scale: f64,
    rhos: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMethod {
    /// Closed-form dual functions where available.
    Auto,
    /// Direct Gaussian quadrature over the covariance, never a closed form.
    Quadrature,
}

fn log_add_exp(x: f64, y: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return y;
    }
    if y == f64::NEG_INFINITY {
        return x;
    }
    let m = x.max(y);
    m + ((x - m).exp() + (y - m).exp()).ln()
}

impl KernelState {
    pub fn sxx(&self) -> f64 {
        self.log_scale.exp() * self.a
    }

    pub fn sxy(&self) -> f64 {
        self.log_scale.exp() * self.b
    }

    pub fn syy(&self) -> f64 {
        self.log_scale.exp() * self.c
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn rho(&self) -> f64 {
        if self.a > 0.0 && self.c > 0.0 {
            (self.b / (self.a * self.c).sqrt()).clamp(-1.0, 1.0)
        } else if self.a == self.c {
            1.0
        } else {
            0.0
        }
    }

    /// Per-layer NTK contributions in true units.
    pub fn theta_terms(&self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.terms.iter().map(|t| s * t).collect()
    }

    pub fn theta(&self) -> f64 {
        self.log_scale.exp() * self.terms.iter().sum::<f64>()
    }

    /// `log(theta)` split as `(log_scale, stored sum)`, for values whose
    /// magnitude does not fit in `f64`.
    pub fn theta_scaled(&self) -> (f64, f64) {
        (self.log_scale, self.terms.iter().sum())
    }

    pub fn ln_scale(&self) -> f64 {
        self.log_ln_scale.exp()
    }

    /// Correlations entering every nonlinearity so far.
    pub fn rho_trajectory(&self) -> &[f64] {
        &self.rhos
    }

    fn renormalise(&mut self) {
        let m = self.a.max(self.c);
        if m > 0.0 && m.is_finite() {
            self.log_scale += m.ln();
            self.a /= m;
            self.b /= m;
            self.c /= m;
            self.terms.iter_mut().for_each(|t| *t /= m);
        }
    }

    fn check_finite(&self) -> Result<()> {
        let ok = [self.a, self.b, self.c, self.log_scale].iter().all(|v| v.is_finite())
            && self.terms.iter().all(|t| t.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFiniteState(self.h))
        }
    }
}

fn check_dims(x: &[f64], xp: &[f64], arch: &ArchSpec) -> Result<()> {
    for v in [x, xp] {
        if v.len() != arch.input_dim {
            return Err(Error::DimensionMismatch { expected: arch.input_dim, got: v.len() });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn nngp_init(x: &[f64], xp: &[f64], arch: &ArchSpec) -> Result<KernelState> {
    nngp_init_scaled(x, xp, 0.0, arch)
}

/// Initial state for the pair `(e^t x, e^t x′)` with `t = log_lambda`.
pub fn nngp_init_scaled(x: &[f64], xp: &[f64], log_lambda: f64, arch: &ArchSpec) -> Result<KernelState> {
    check_dims(x, xp, arch)?;
    let n0 = arch.input_dim as f64;
    let (qxx, qxy, qyy) = (dot(x, x) / n0, dot(x, xp) / n0, dot(xp, xp) / n0);
    let log_bias = arch.sigma_b2().ln();
    let log_of = |q: f64| if q > 0.0 { 2.0 * log_lambda + q.ln() } else { f64::NEG_INFINITY };
    let ls = log_add_exp(log_of(qxx.max(qyy)), log_bias);
    let ls = if ls.is_finite() { ls } else { 0.0 };
    let scaled = |q: f64| q * (2.0 * log_lambda - ls).exp() + (log_bias - ls).exp();
    let state = KernelState {
        h: 0,
        log_scale: ls,
        a: scaled(qxx),
        b: scaled(qxy),
        c: scaled(qyy),
        terms: vec![scaled(qxy)],
        log_ln_scale: 0.0,
        rhos: Vec::new(),
    };
    state.check_finite()?;
    Ok(state)
}

pub fn layer_step(state: &KernelState, arch: &ArchSpec) -> Result<KernelState> {
    layer_step_with(state, arch, StepMethod::Auto)
}

/// Apply nonlinearity `h+1` and linear map `h+2`, recording `Σ̇`.
pub fn layer_step_with(state: &KernelState, arch: &ArchSpec, method: StepMethod) -> Result<KernelState> {
    if state.h >= arch.depth {
        return Err(Error::ContractViolation(format!("layer_step at h = {} with depth {}", state.h, arch.depth)));
    }
    let act = &arch.activation;
    let s2 = arch.sigma_b2();
    let mut next = state.clone();
    let rho = state.rho();
    next.rhos.push(rho);
    next.h += 1;
    if act.is_exactly_homogeneous() && method == StepMethod::Auto {
        let n = act.homogeneity_degree();
        let (a, c) = (state.a, state.c);
        let bias = s2 * (-n * state.log_scale).exp();
        let k1 = act.kappa(1.0)?;
        let prod = a * c;
        next.a = a.powf(n) * k1 + bias;
        next.c = c.powf(n) * k1 + bias;
        next.b = prod.powf(n / 2.0) * act.kappa(rho)? + bias;
        let dot = prod.powf((n - 1.0) / 2.0) * act.kappa_dot(rho)?;
        next.terms.iter_mut().for_each(|t| *t *= dot);
        next.terms.push(next.b);
        next.log_scale = n * state.log_scale;
    } else {
        let (sxx, sxy, syy) = (state.sxx(), state.sxy(), state.syy());
        let vxx = act.c_phi() * act.gaussian_square_moment(sxx)? + s2;
        let vyy = act.c_phi() * act.gaussian_square_moment(syy)? + s2;
        let (cross, dot) = act.gaussian_pair_moments(sxx, sxy, syy)?;
        let scale = state.log_scale.exp();
        next.terms.iter_mut().for_each(|t| *t *= scale * dot);
        next.a = vxx;
        next.b = cross + s2;
        next.c = vyy;
        next.terms.push(next.b);
        next.log_scale = 0.0;
    }
    next.renormalise();
    next.check_finite()?;
    Ok(next)
}

/// Layer norm on the current pre-activation: unit variances, and every
/// contribution accumulated so far divided by `sqrt(Σxx Σx′x′)`.
pub fn ln_step(state: &KernelState) -> Result<KernelState> {
    let floor = 1e-300f64.ln();
    for v in [state.a, state.c] {
        if !(v > 0.0) || v.ln() + state.log_scale < floor {
            return Err(Error::ZeroVariance);
        }
    }
    let rho = state.rho();
    let root = (state.a * state.c).sqrt();
    let mut next = state.clone();
    next.terms.iter_mut().for_each(|t| *t /= root);
    next.log_ln_scale += -state.log_scale - root.ln();
    next.log_scale = 0.0;
    next.a = 1.0;
    next.b = rho;
    next.c = 1.0;
    Ok(next)
}

fn run(arch: &ArchSpec, x: &[f64], xp: &[f64], log_lambda: f64, method: StepMethod) -> Result<KernelState> {
    let mut state = nngp_init_scaled(x, xp, log_lambda, arch)?;
    for p in 0..arch.depth {
        if arch.ln_positions.contains(&p) {
            state = ln_step(&state)?;
        }
        state = layer_step_with(&state, arch, method)?;
    }
    Ok(state)
}

/// Final kernel state for the pair, with the full term list and trajectory.
pub fn ntk_state(arch: &ArchSpec, x: &[f64], xp: &[f64], method: StepMethod) -> Result<KernelState> {
    run(arch, x, xp, 0.0, method)
}

/// Fixed argument order so that Θ(x, x′) and Θ(x′, x) share one evaluation
/// and agree bit for bit.
fn canonical<'a>(x: &'a [f64], xp: &'a [f64]) -> (&'a [f64], &'a [f64]) {
    let swap = x.iter().zip(xp).map(|(a, b)| a.total_cmp(b)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Greater);
    if swap {
        (xp, x)
    } else {
        (x, xp)
    }
}

pub fn ntk(arch: &ArchSpec, x: &[f64], xp: &[f64]) -> Result<f64> {
    let (x, xp) = canonical(x, xp);
    let v = run(arch, x, xp, 0.0, StepMethod::Auto)?.theta();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteState(arch.depth))
    }
}

/// NNGP covariance of the network output, `Σ⁽ᴸ⁾(x, x′)`.
pub fn nngp(arch: &ArchSpec, x: &[f64], xp: &[f64]) -> Result<f64> {
    let (x, xp) = canonical(x, xp);
    Ok(run(arch, x, xp, 0.0, StepMethod::Auto)?.sxy())
}

pub fn ntk_gram(arch: &ArchSpec, xs: &Matrix) -> Result<Matrix> {
    let n = xs.rows();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| ntk(arch, xs.row(i), xs.row(j)))
        .collect::<Result<_>>()?;
    let mut g = Matrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        g[(i, j)] = v;
        g[(j, i)] = v;
    }
    Ok(g)
}

/// `Θ(x, X)` for every row of `xs`.
pub fn ntk_row(arch: &ArchSpec, x: &[f64], xs: &Matrix) -> Result<Vec<f64>> {
    (0..xs.rows()).map(|i| ntk(arch, x, xs.row(i))).collect()
}

pub fn soft_cosine(x: &[f64], xp: &[f64], sigma2: f64) -> Result<f64> {
    if x.len() != xp.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: xp.len() });
    }
    let n = x.len() as f64;
    let den = ((dot(x, x) / n + sigma2) * (dot(xp, xp) / n + sigma2)).sqrt();
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    Ok(((dot(x, xp) / n + sigma2) / den).clamp(-1.0, 1.0))
}

/// NTK of an architecture whose input goes straight through linear + LN.
/// In debug builds the result is re-derived from a different input pair with
/// the same soft-cosine similarity and the two must agree.
pub fn ln_first_kernel(arch: &ArchSpec, x: &[f64], xp: &[f64]) -> Result<f64> {
    if !arch.ln_positions.contains(&0) {
        return Err(Error::InvalidArch("ln_first_kernel needs layer norm at position 0".into()));
    }
    let theta = ntk(arch, x, xp)?;
    if cfg!(debug_assertions) {
        let s = soft_cosine(x, xp, arch.sigma_b2())?;
        if let Some((u, up)) = pair_with_similarity(s, arch.input_dim, arch.sigma_b2()) {
            let other = ntk(arch, &u, &up)?;
            if (other - theta).abs() > 1e-10 * theta.abs().max(1.0) {
                return Err(Error::ContractViolation(format!(
                    "LN-first kernel differs across equal similarity: {theta} vs {other}"
                )));
            }
        }
    }
    Ok(theta)
}

/// Two vectors of equal norm whose soft-cosine is `s`, if one exists.
fn pair_with_similarity(s: f64, n0: usize, sigma2: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    if n0 < 2 {
        return None;
    }
    let n = n0 as f64;
    // with ‖u‖² = n q the similarity is (q cos φ + σ²)/(q + σ²)
    for q in [1.0, 10.0, 1e3, 1e6] {
        let cos = (s * (q + sigma2) - sigma2) / q;
        if cos.abs() <= 1.0 {
            let r = (n * q).sqrt();
            let mut u = vec![0.0; n0];
            let mut up = vec![0.0; n0];
            u[0] = r;
            up[0] = r * cos;
            up[1] = r * (1.0 - cos * cos).max(0.0).sqrt();
            return Some((u, up));
        }
    }
    None
}

/// Trajectory `ρ̂⁽ʰ⁺¹⁾ = κ(ρ̂⁽ʰ⁾)` of the limit correlation, `h = 0..L`.
pub fn limit_correlation(arch: &ArchSpec, xh: &[f64], xhp: &[f64]) -> Result<Vec<f64>> {
    check_dims(xh, xhp, arch)?;
    let (nx, ny) = (dot(xh, xh).sqrt(), dot(xhp, xhp).sqrt());
    let mut rho = if nx == 0.0 && ny == 0.0 {
        1.0
    } else if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        (dot(xh, xhp) / (nx * ny)).clamp(-1.0, 1.0)
    };
    let mut out = vec![rho];
    for _ in 0..arch.depth {
        rho = arch.activation.kappa(rho)?.clamp(-1.0, 1.0);
        out.push(rho);
    }
    Ok(out)
}

/// `Θ(λx, λx′) / λ^(2 n^L)` for each `λ`, evaluated in log-scaled arithmetic.
pub fn limit_ntk_ratio(arch: &ArchSpec, x: &[f64], xp: &[f64], lambdas: &[f64]) -> Result<Vec<f64>> {
    if arch.has_ln() {
        return Err(Error::InvalidArch("limit_ntk_ratio needs an architecture without layer norm".into()));
    }
    let n = arch.activation.homogeneity_degree();
    let exponent = 2.0 * n.powi(arch.depth as i32);
    lambdas
        .iter()
        .map(|&l| {
            if !(l > 0.0) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
            let state = run(arch, x, xp, l.ln(), StepMethod::Auto)?;
            let (ls, sum) = state.theta_scaled();
            Ok((ls - exponent * l.ln()).exp() * sum)
        })
        .collect()
}

/// `Θ(s·d, s·d)` for each norm `s`.
pub fn variance_curve(arch: &ArchSpec, direction: &[f64], norms: &[f64]) -> Result<Vec<f64>> {
    norms
        .iter()
        .map(|&s| {
            if !(s > 0.0) {
                return Err(Error::Config(format!("norm must be positive, got {s}")));
            }
            let state = run(arch, direction, direction, s.ln(), StepMethod::Auto)?;
            let v = state.theta();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteState(arch.depth))
            }
        })
        .collect()
}

/// Supremum of `Θ(x, x)` over all inputs, for architectures where it is
/// finite.
///
/// The diagonal depends on `x` only through `‖x‖`, so this scans a log grid
/// of norms from 1e-3 to 1e12 (plus `x = 0`), refines an interior maximum by
/// golden-section search in `log ‖x‖`, and checks that the tail has levelled
/// off. A tail still moving by more than 1% per decade means the kernel grows
/// without bound and gives [`Error::UnboundedKernel`].
pub fn variance_sup(arch: &ArchSpec) -> Result<f64> {
    if !arch.has_ln() {
        return Err(Error::UnboundedKernel);
    }
    let mut dir = vec![0.0; arch.input_dim];
    dir[0] = 1.0;
    let logs: Vec<f64> = (-60..=240).map(|k| k as f64 / 20.0 * std::f64::consts::LN_10).collect();
    let diag = |log_r: f64| -> Result<f64> {
        let v = run(arch, &dir, &dir, log_r, StepMethod::Auto)?.theta();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteState(arch.depth))
        }
    };
    let values: Vec<f64> = logs.par_iter().map(|&l| diag(l)).collect::<Result<_>>()?;
    let zero = vec![0.0; arch.input_dim];
    let at_zero = ntk(arch, &zero, &zero)?;

    // tail: the last two decades must agree to 1%
    let tail = &values[values.len() - 41..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo > 1e-2 * hi.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::UnboundedKernel);
    }

    let (imax, vmax) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let mut best = vmax.max(at_zero);
    if imax > 0 && imax + 1 < values.len() {
        let (mut a, mut b) = (logs[imax - 1], logs[imax + 1]);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
        let (mut fc, mut fd) = (diag(c)?, diag(d)?);
        for _ in 0..40 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = diag(c)?;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = diag(d)?;
            }
        }
        best = best.max(fc).max(fd);
    }
    Ok(best)
}

/// Convenience constructor used across experiments and tests.
pub fn relu_arch(input_dim: usize, depth: usize, sigma_b: f64, ln: &[usize]) -> Result<ArchSpec> {
    ArchSpec::new(input_dim, depth, ActivationKind::new(ActivationName::Relu)?, sigma_b)?.with_ln(ln.iter().copied())
}
