//! Desk-scale experiment drivers: toy regression with finite networks,
//! extrapolation scans, empirical NTK heatmaps and explosion measurements.
//!
//! Every driver is a pure function of its configuration and seeds. Seeds run
//! in parallel, and results are reduced in seed order, so output is bitwise
//! reproducible.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationKind;
use crate::analytic_ntk::{ntk, ArchSpec};
use crate::empirical_net::{empirical_ntk_grid_stats, init_net, init_stream, FiniteNet, Parametrisation};
use crate::gp_predictor::{fit_default, Dataset, Predictor};
use crate::numerics::{sample_normal, Matrix, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Sine,
    Linear,
    Quadratic,
}

impl ToyKind {
    pub const ALL: [ToyKind; 3] = [ToyKind::Sine, ToyKind::Linear, ToyKind::Quadratic];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "sine" => Ok(Self::Sine),
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Sine => "sine",
            Self::Linear => "linear",
            Self::Quadratic => "quadratic",
        }
    }

    /// `sin(2x)`, `x/2` or `x²/4`.
    pub fn target(&self, x: f64) -> f64 {
        match self {
            Self::Sine => libm::sin(2.0 * x),
            Self::Linear => 0.5 * x,
            Self::Quadratic => 0.25 * x * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetConfig {
    pub kind: ToyKind,
    pub n_points: usize,
    pub lo: f64,
    pub hi: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl ToyDatasetConfig {
    /// 100 noiseless points on [-3, 3].
    pub fn standard(kind: ToyKind) -> Self {
        Self { kind, n_points: 100, lo: -3.0, hi: 3.0, noise_sd: 0.0, seed: 0 }
    }
}

pub fn make_toy_dataset(cfg: &ToyDatasetConfig) -> Result<Dataset> {
    if !(cfg.lo < cfg.hi) || cfg.n_points < 2 {
        return Err(Error::Config(format!(
            "toy dataset needs lo < hi and at least 2 points, got [{}, {}] with {}",
            cfg.lo, cfg.hi, cfg.n_points
        )));
    }
    if !(cfg.noise_sd >= 0.0) {
        return Err(Error::Config(format!("noise_sd must be non-negative, got {}", cfg.noise_sd)));
    }
    let step = (cfg.hi - cfg.lo) / (cfg.n_points - 1) as f64;
    let xs: Vec<f64> = (0..cfg.n_points).map(|i| cfg.lo + step * i as f64).collect();
    let noise = if cfg.noise_sd > 0.0 {
        sample_normal(&mut RngStream::new(cfg.seed, 0x6461_7461), cfg.n_points)
    } else {
        vec![0.0; cfg.n_points]
    };
    let ys = xs.iter().zip(&noise).map(|(&x, e)| cfg.kind.target(x) + cfg.noise_sd * e).collect();
    Dataset::from_1d(&xs, ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    FullBatchGd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Adam with learning rate 1e-3 for 3000 full-batch epochs.
    pub fn adam(seed: u64) -> Self {
        Self { optimizer: Optimizer::Adam, learning_rate: 1e-3, epochs: 3000, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training stops with [`Error::Diverged`] once the loss exceeds this
/// multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Full-batch training on the mean squared error. Returns the trained network
/// and the loss before every update plus the final loss.
pub fn train(net: &FiniteNet, data: &Dataset, cfg: &TrainConfig) -> Result<(FiniteNet, Vec<f64>)> {
    cfg.validate()?;
    let mut net = net.clone();
    let n = net.num_params();
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    // running powers of the moment decays; `powi` may round differently
    // between optimisation levels
    let (mut b1t, mut b2t) = (1.0f64, 1.0f64);
    let diverged = |loss: f64, trace: &[f64]| {
        !loss.is_finite() || trace.first().is_some_and(|l0| loss > DIVERGENCE_FACTOR * l0.max(f64::MIN_POSITIVE))
    };
    for epoch in 0..cfg.epochs {
        let (loss, grad) = match net.mse_and_grad(data.x(), data.y()) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged(epoch)),
            Err(e) => return Err(e),
        };
        if diverged(loss, &trace) {
            return Err(Error::Diverged(epoch));
        }
        trace.push(loss);
        let lr = cfg.learning_rate;
        b1t *= b1;
        b2t *= b2;
        let params = net.params_mut();
        match cfg.optimizer {
            Optimizer::FullBatchGd => params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g),
            Optimizer::Adam => {
                let (c1, c2) = (1.0 - b1t, 1.0 - b2t);
                for i in 0..n {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    let last = match net.mse_and_grad(data.x(), data.y()) {
        Ok((l, _)) => l,
        Err(Error::NonFinite(_)) => return Err(Error::Diverged(cfg.epochs)),
        Err(e) => return Err(e),
    };
    if diverged(last, &trace) {
        return Err(Error::Diverged(cfg.epochs));
    }
    trace.push(last);
    Ok((net, trace))
}

/// Training-set coefficient of determination.
pub fn r_squared(net: &FiniteNet, data: &Dataset) -> Result<f64> {
    let preds = net.predict_batch(data.x())?;
    let y = data.y();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(&preds).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Anything that maps a 1-D input to a prediction.
pub trait Predict1d: Sync {
    fn predict_at(&self, x: f64) -> Result<f64>;
}

impl Predict1d for FiniteNet {
    fn predict_at(&self, x: f64) -> Result<f64> {
        self.predict(&[x])
    }
}

impl Predict1d for Predictor {
    fn predict_at(&self, x: f64) -> Result<f64> {
        self.predict_mean(&[x])
    }
}

pub fn extrapolation_scan(model: &impl Predict1d, xs: &[f64]) -> Result<Vec<(f64, f64)>> {
    xs.iter().map(|&x| Ok((x, model.predict_at(x)?))).collect()
}

/// One row of a multi-seed prediction curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval of the mean,
    /// `1.96 · sd / sqrt(seeds)`.
    pub ci_half_width: f64,
}

/// Mean and 95% half-width across seeds, per scan point.
pub fn aggregate_scans(xs: &[f64], per_seed: &[Vec<f64>]) -> Vec<CurvePoint> {
    let k = per_seed.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let vals: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
            let mean = vals.iter().sum::<f64>() / k;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            CurvePoint { x, mean, ci_half_width: 1.96 * sd / k.sqrt() }
        })
        .collect()
}

/// Layer-norm placements compared in the toy experiments (depth 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoLn,
    LnFirst,
    LnMid,
    LnEvery,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoLn, Variant::LnFirst, Variant::LnMid, Variant::LnEvery];

    pub fn label(&self) -> &'static str {
        match self {
            Self::NoLn => "no_ln",
            Self::LnFirst => "ln_first",
            Self::LnMid => "ln_mid",
            Self::LnEvery => "ln_every",
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        match self {
            Self::NoLn => vec![],
            Self::LnFirst => vec![0],
            Self::LnMid => vec![1],
            Self::LnEvery => vec![0, 1],
        }
    }

    /// Depth-2 ReLU network on 1-D inputs with `σ_b² = 0.01`.
    pub fn arch(&self, width: usize) -> Result<ArchSpec> {
        ArchSpec::new(1, 2, ActivationKind::relu(), 0.1)?.with_width(width)?.with_ln(self.positions())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyExperimentConfig {
    pub dataset: ToyDatasetConfig,
    pub width: usize,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Scan points; the default covers five times the training range.
    pub scan: Vec<f64>,
}

impl ToyExperimentConfig {
    pub fn standard(kind: ToyKind, seeds: Vec<u64>) -> Self {
        let dataset = ToyDatasetConfig::standard(kind);
        Self { dataset, width: 128, train: TrainConfig::adam(0), seeds, scan: default_scan(&dataset, 5.0, 301) }
    }
}

/// `n` equally spaced points on `[-factor · R, factor · R]` where `R` is the
/// largest absolute training input.
pub fn default_scan(cfg: &ToyDatasetConfig, factor: f64, n: usize) -> Vec<f64> {
    let edge = factor * cfg.lo.abs().max(cfg.hi.abs());
    (0..n).map(|i| -edge + 2.0 * edge * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyRun {
    pub variant: Variant,
    pub curve: Vec<CurvePoint>,
    pub final_losses: Vec<f64>,
}

/// Train one network per seed in standard parametrisation and scan its
/// predictions.
pub fn toy_experiment(cfg: &ToyExperimentConfig, variant: Variant) -> Result<ToyRun> {
    let (curve, final_losses) = toy_runs(cfg, &variant.arch(cfg.width)?)?;
    Ok(ToyRun { variant, curve, final_losses })
}

/// [`toy_experiment`] for an arbitrary 1-D architecture; `cfg.width` is
/// ignored in favour of the widths in `arch`. Returns the aggregated curve
/// and the final training loss per seed.
pub fn toy_runs(cfg: &ToyExperimentConfig, arch: &ArchSpec) -> Result<(Vec<CurvePoint>, Vec<f64>)> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let data = make_toy_dataset(&cfg.dataset)?;
    let runs: Vec<(Vec<f64>, f64)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let net = init_net(arch, Parametrisation::Standard, &init_stream(seed))?;
            let (trained, trace) = train(&net, &data, &TrainConfig { seed, ..cfg.train })?;
            let preds = cfg.scan.iter().map(|&x| trained.predict(&[x])).collect::<Result<Vec<_>>>()?;
            Ok((preds, *trace.last().expect("trace has the final loss")))
        })
        .collect::<Result<_>>()?;
    let scans: Vec<Vec<f64>> = runs.iter().map(|r| r.0.clone()).collect();
    Ok((aggregate_scans(&cfg.scan, &scans), runs.iter().map(|r| r.1).collect()))
}

/// 1-D grid of `n` points on `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(lo < hi) {
        return Err(Error::Config(format!("grid needs lo < hi and n ≥ 2, got [{lo}, {hi}] with {n}")));
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub xs: Vec<f64>,
    pub mean: Matrix,
    pub sd: Matrix,
    pub n_seeds: usize,
    /// Infinite-width kernel on the same grid.
    pub analytic: Matrix,
}

impl Heatmap {
    /// Largest grid value over the median grid value.
    pub fn max_over_median(&self) -> f64 {
        let mut v = self.mean.data().to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        v[n - 1] / median
    }

    /// Index of the grid point closest to `x`.
    pub fn index_of(&self, x: f64) -> usize {
        self.xs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn at(&self, x: f64, xp: f64) -> f64 {
        self.mean[(self.index_of(x), self.index_of(xp))]
    }
}

/// Seed-averaged empirical NTK on a 1-D grid, with the analytic kernel for
/// comparison.
pub fn heatmap_experiment(arch: &ArchSpec, xs: &[f64], seeds: &[u64], param: Parametrisation) -> Result<Heatmap> {
    if arch.input_dim != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: arch.input_dim });
    }
    let pts = Matrix::new(xs.len(), 1, xs.to_vec())?;
    let (mean, sd) = empirical_ntk_grid_stats(arch, param, &pts, seeds)?;
    let n = xs.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| ntk(arch, &[xs[i]], &[xs[j]])).collect::<Result<_>>()?;
    let mut analytic = Matrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        analytic[(i, j)] = v;
        analytic[(j, i)] = v;
    }
    Ok(Heatmap { xs: xs.to_vec(), mean, sd, n_seeds: seeds.len(), analytic })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplosionReport {
    pub lambdas: Vec<f64>,
    /// Largest `|m(λ xᵢ)|` over the training directions, per `λ`.
    pub max_abs_mean: Vec<f64>,
    /// Least-squares slope of `log max|m|` against `log λ` over the last two
    /// decades of `λ`.
    pub slope: f64,
    pub max_abs_y: f64,
    /// Present when the architecture has a finite variance constant.
    pub bound_rkhs: Option<f64>,
}

/// Fit the infinite-width predictor and push every training input out along
/// its own ray.
pub fn explosion_experiment(arch: &ArchSpec, data: &Dataset, lambdas: &[f64]) -> Result<ExplosionReport> {
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Config("lambdas must be positive".into()));
    }
    let p = fit_default(arch, data)?;
    let max_abs_mean: Vec<f64> = lambdas
        .par_iter()
        .map(|&l| {
            (0..data.len()).try_fold(0.0f64, |m, i| {
                let x: Vec<f64> = data.x().row(i).iter().map(|v| v * l).collect();
                Ok(m.max(p.predict_mean(&x)?.abs()))
            })
        })
        .collect::<Result<_>>()?;
    let top = lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tail: Vec<(f64, f64)> = lambdas
        .iter()
        .zip(&max_abs_mean)
        .filter(|(l, m)| **l >= top / 100.0 * (1.0 - 1e-12) && **m > 0.0)
        .map(|(l, m)| (l.ln(), m.ln()))
        .collect();
    let slope = if tail.len() >= 2 { least_squares_slope(&tail) } else { f64::NAN };
    let bound_rkhs = match p.bound_rkhs() {
        Ok(b) => Some(b),
        Err(Error::UnboundedKernel) => None,
        Err(e) => return Err(e),
    };
    Ok(ExplosionReport { lambdas: lambdas.to_vec(), max_abs_mean, slope, max_abs_y: data.max_abs_y(), bound_rkhs })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_targets() {
        let d = make_toy_dataset(&ToyDatasetConfig::standard(ToyKind::Linear)).unwrap();
        assert_eq!(d.len(), 100);
        assert!((d.x()[(1, 0)] - d.x()[(0, 0)] - 6.0 / 99.0).abs() < 1e-15);
        assert_eq!(ToyKind::Linear.target(2.0), 1.0);
        assert_eq!(ToyKind::Sine.target(0.0), 0.0);
        assert_eq!(ToyKind::Quadratic.target(2.0), 1.0);
    }

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4].iter().map(|l: &f64| (l.ln(), (3.0 * l * l).ln())).collect();
        assert!((least_squares_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ci_uses_normal_approximation() {
        let c = aggregate_scans(&[0.0], &[vec![1.0], vec![3.0]]);
        assert_eq!(c[0].mean, 2.0);
        assert!((c[0].ci_half_width - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bad_configs() {
        let mut cfg = ToyDatasetConfig::standard(ToyKind::Sine);
        cfg.lo = 4.0;
        assert!(matches!(make_toy_dataset(&cfg), Err(Error::Config(_))));
        let t = TrainConfig { learning_rate: 0.0, ..TrainConfig::adam(0) };
        assert!(t.validate().is_err());
    }
}
