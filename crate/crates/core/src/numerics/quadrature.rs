use std::f64::consts::{PI, SQRT_2};

use crate::{Error, Result};

/// Gauss–Hermite rule for the weight `exp(-t²)` (physicists' convention).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub order: usize,
}

pub const MAX_HERMITE_ORDER: usize = 256;

pub fn gauss_hermite(order: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_HERMITE_ORDER).contains(&order) {
        return Err(Error::OrderOutOfRange { order, min: 1, max: MAX_HERMITE_ORDER });
    }
    let n = order;
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    // Golub–Welsch: the roots are the eigenvalues of the Jacobi matrix, which
    // gives starting points accurate enough for Newton at any order
    let off: Vec<f64> = (1..n).map(|k| (k as f64 / 2.0).sqrt()).collect();
    let mut guesses = tridiagonal_eigenvalues(vec![0.0; n], off);
    guesses.sort_by(|a, b| a.total_cmp(b));
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for &guess in &guesses {
        let mut z = guess;
        let mut pp = 1.0;
        for _ in 0..20 {
            // orthonormal Hermite recurrence keeps the values O(1) at any order
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        nodes.push(z);
        weights.push(2.0 / (pp * pp));
    }
    // enforce exact symmetry
    for i in 0..n / 2 {
        let z = 0.5 * (nodes[n - 1 - i] - nodes[i]);
        let w = 0.5 * (weights[i] + weights[n - 1 - i]);
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok(QuadratureRule { nodes, weights, order })
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `d` and
/// off-diagonal `e` (implicit QL with Wilkinson shifts).
fn tridiagonal_eigenvalues(mut d: Vec<f64>, off: Vec<f64>) -> Vec<f64> {
    let n = d.len();
    let mut e = off;
    e.push(0.0);
    for l in 0..n {
        for _iter in 0..60 {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d
}

/// `E[f(x)]` for `x ~ N(0,1)` under a Gauss–Hermite rule.
pub fn gaussian_expect(f: impl Fn(f64) -> f64, rule: &QuadratureRule) -> f64 {
    let s: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(t, w)| w * f(SQRT_2 * t))
        .sum();
    s / PI.sqrt()
}

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1..=512).contains(&order) {
        return Err(Error::OrderOutOfRange { order, min: 1, max: 512 });
    }
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Ok((nodes, weights))
}

/// Radius beyond which the standard normal density is negligible even against
/// degree-60 polynomial growth.
const SPLIT_RADIUS: usize = 40;
/// Radius for the two-dimensional split rule (integrands of degree <= 20).
const POLAR_RADIUS: usize = 20;
/// Radius for the graded rule, meant for activation products that grow at
/// most quadratically; the Gaussian weight there is e^-50.
const GRADED_RADIUS: usize = 10;

/// `E[f(x)]` for `x ~ N(0,1)` when `f` may have a kink or jump at 0.
///
/// Each half-line is integrated with composite Gauss–Legendre on unit panels,
/// so piecewise-smooth integrands converge spectrally.
pub fn gaussian_expect_split(f: impl Fn(f64) -> f64, order: usize) -> Result<f64> {
    let (t, w) = gauss_legendre(order)?;
    let norm = 1.0 / (2.0 * PI).sqrt();
    let mut total = 0.0;
    for panel in 0..SPLIT_RADIUS {
        let mid = panel as f64 + 0.5;
        for (ti, wi) in t.iter().zip(&w) {
            let x = mid + 0.5 * ti;
            let g = (-0.5 * x * x).exp();
            if g == 0.0 {
                continue;
            }
            total += 0.5 * wi * g * (f(x) + f(-x));
        }
    }
    Ok(total * norm)
}

/// Like [`gaussian_expect_split`] but with panels graded geometrically toward
/// the origin, for integrands that change on a short scale near zero.
pub fn gaussian_expect_graded(f: impl Fn(f64) -> f64, order: usize, levels: usize) -> Result<f64> {
    let (t, w) = gauss_legendre(order)?;
    let mut edges = vec![0.0];
    for k in (0..=levels).rev() {
        edges.push(10f64.powi(-(k as i32)));
    }
    for r in 2..=SPLIT_RADIUS {
        edges.push(r as f64);
    }
    let mut total = 0.0;
    for e in edges.windows(2) {
        let (mid, half) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
        for (ti, wi) in t.iter().zip(&w) {
            let x = mid + half * ti;
            total += half * wi * (-0.5 * x * x).exp() * (f(x) + f(-x));
        }
    }
    Ok(total / (2.0 * PI).sqrt())
}

/// `E[f(x, y)]` for a standard bivariate normal with correlation `rho`, using
/// the whitening `y = rho x + sqrt(1 - rho²) z` and a tensor-product rule.
/// Spectrally accurate for smooth `f`.
pub fn bivariate_gaussian_expect(
    f: impl Fn(f64, f64) -> f64,
    rho: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    let rho = super::clamp_rho(rho)?;
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let mut total = 0.0;
    for (ti, wi) in rule.nodes.iter().zip(&rule.weights) {
        let x = SQRT_2 * ti;
        let mut inner = 0.0;
        for (tj, wj) in rule.nodes.iter().zip(&rule.weights) {
            inner += wj * f(x, rho * x + s * SQRT_2 * tj);
        }
        total += wi * inner;
    }
    Ok(total / PI)
}

/// `E[f(x, y)]` for integrands that are only piecewise smooth, with breaks on
/// the lines `x = 0` and `y = 0` (ReLU-type products, step functions).
///
/// Works in polar coordinates of the whitened pair: the angular integral is
/// split at the directions where either coordinate changes sign and each arc
/// gets its own Gauss–Legendre rule; the radial integral uses composite
/// Gauss–Legendre panels.
pub fn bivariate_gaussian_expect_split(
    f: impl Fn(f64, f64) -> f64,
    rho: f64,
    order: usize,
) -> Result<f64> {
    let rho = super::clamp_rho(rho)?;
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let (at, aw) = gauss_legendre(order)?;
    let (rt, rw) = gauss_legendre((order / 2).max(8))?;

    // angles in [0, π) where x = 0 or y = 0 along the ray
    let mut breaks = vec![0.0, PI / 2.0];
    let ty = (-rho).atan2(s).rem_euclid(PI);
    breaks.push(ty);
    breaks.push(PI);
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let mut radial = Vec::with_capacity(POLAR_RADIUS * rt.len());
    for panel in 0..POLAR_RADIUS {
        let mid = panel as f64 + 0.5;
        for (ti, wi) in rt.iter().zip(&rw) {
            let r = mid + 0.5 * ti;
            radial.push((r, 0.5 * wi * r * (-0.5 * r * r).exp()));
        }
    }

    let mut total = 0.0;
    for arc in breaks.windows(2) {
        let (a, b) = (arc[0], arc[1]);
        let half = 0.5 * (b - a);
        if half <= 0.0 {
            continue;
        }
        let mid = 0.5 * (a + b);
        let mut arc_sum = 0.0;
        for (ti, wi) in at.iter().zip(&aw) {
            let theta = mid + half * ti;
            let (sn, cs) = theta.sin_cos();
            let dy = rho * cs + s * sn;
            let mut line = 0.0;
            for &(r, w) in &radial {
                let (x, y) = (r * cs, r * dy);
                line += w * (f(x, y) + f(-x, -y));
            }
            arc_sum += wi * half * line;
        }
        total += arc_sum;
    }
    Ok(total / (2.0 * PI))
}

/// Polar split rule with panels graded geometrically toward the origin and
/// toward every arc break. Suited to integrands that are smooth but vary on a
/// short length scale near the axes, such as `tanh(k x) tanh(k y)` for large
/// `k`. `levels` controls how many graded panels sit next to each break.
pub fn bivariate_gaussian_expect_graded(
    f: impl Fn(f64, f64) -> f64,
    rho: f64,
    order: usize,
    levels: usize,
) -> Result<f64> {
    const RATIO: f64 = 0.2;
    let rho = super::clamp_rho(rho)?;
    let s = (1.0 - rho * rho).max(0.0).sqrt();
    let (t, w) = gauss_legendre(order)?;

    let mut breaks = vec![0.0, PI / 2.0, (-rho).atan2(s).rem_euclid(PI), PI];
    breaks.sort_by(|a, b| a.total_cmp(b));
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let mut redges = vec![0.0];
    for k in (0..=levels).rev() {
        redges.push(10f64.powi(-(k as i32)));
    }
    for r in 2..=GRADED_RADIUS {
        redges.push(r as f64);
    }
    let mut radial = Vec::with_capacity(redges.len() * t.len());
    for e in redges.windows(2) {
        let (mid, half) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
        for (ti, wi) in t.iter().zip(&w) {
            let r = mid + half * ti;
            radial.push((r, half * wi * r * (-0.5 * r * r).exp()));
        }
    }

    let mut total = 0.0;
    for arc in breaks.windows(2) {
        let (a, b) = (arc[0], arc[1]);
        if b - a <= 0.0 {
            continue;
        }
        let len = b - a;
        let mut edges = vec![a];
        for k in (1..=levels).rev() {
            edges.push(a + 0.5 * len * RATIO.powi(k as i32));
        }
        edges.push(0.5 * (a + b));
        for k in 1..=levels {
            edges.push(b - 0.5 * len * RATIO.powi(k as i32));
        }
        edges.push(b);
        for e in edges.windows(2) {
            let (mid, half) = (0.5 * (e[0] + e[1]), 0.5 * (e[1] - e[0]));
            for (ti, wi) in t.iter().zip(&w) {
                let (sn, cs) = (mid + half * ti).sin_cos();
                let dy = rho * cs + s * sn;
                let mut line = 0.0;
                for &(r, rw) in &radial {
                    let (x, y) = (r * cs, r * dy);
                    line += rw * (f(x, y) + f(-x, -y));
                }
                total += half * wi * line;
            }
        }
    }
    Ok(total / (2.0 * PI))
}
