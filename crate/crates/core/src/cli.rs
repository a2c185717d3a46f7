//! Command-line front end for the `ntkln` binary.
//!
//! Every subcommand is driven by a [`RunConfig`]. Values come from the
//! command's defaults, then an optional `key=value` config file, then flags,
//! with later sources winning. Tables are written as CSV (17 significant
//! digits, LF endings, header row) or JSON, and every file output gets a JSON
//! manifest next to it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::activations::{ActivationKind, ActivationName};
use crate::analytic_ntk::{limit_ntk_ratio, ntk, variance_curve, ArchSpec};
use crate::empirical_net::Parametrisation;
use crate::experiments::{
    default_scan, grid, heatmap_experiment, make_toy_dataset, toy_runs, Optimizer, ToyDatasetConfig,
    ToyExperimentConfig, ToyKind, TrainConfig,
};
use crate::gp_predictor::fit_default;
use crate::{Error, Result};

/// Environment variable holding the default base seed.
pub const SEED_ENV: &str = "NTKLN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Kernel,
    Heatmap,
    VarianceCurve,
    Homogeneity,
    FitPredict,
    BoundCheck,
    TrainToy,
    Hermite,
}

impl CommandKind {
    pub const ALL: [CommandKind; 8] = [
        Self::Kernel,
        Self::Heatmap,
        Self::VarianceCurve,
        Self::Homogeneity,
        Self::FitPredict,
        Self::BoundCheck,
        Self::TrainToy,
        Self::Hermite,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Kernel => "kernel",
            Self::Heatmap => "heatmap",
            Self::VarianceCurve => "variance-curve",
            Self::Homogeneity => "homogeneity",
            Self::FitPredict => "fit-predict",
            Self::BoundCheck => "bound-check",
            Self::TrainToy => "train-toy",
            Self::Hermite => "hermite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown command '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Full configuration of one run. Every field is settable through a config
/// file key or a flag of the same name (dashes and underscores are
/// interchangeable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandKind,
    pub activation: String,
    pub depth: usize,
    pub width: usize,
    /// Layer-norm placement: `none`, `first`, `mid`, `last`, `every` or a
    /// comma list of positions, resolved against `depth`.
    pub ln: String,
    pub sigma_b: f64,
    pub parametrisation: Parametrisation,
    pub dataset: ToyKind,
    pub n_points: usize,
    pub seeds: Vec<u64>,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_n: usize,
    pub norms: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub x: Vec<f64>,
    pub xp: Vec<f64>,
    pub order: usize,
    pub rho: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub scan_factor: f64,
    pub scan_points: usize,
    pub output: Option<PathBuf>,
    pub format: Format,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse::<T>().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|t| parse_num(key, t)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn log_spaced(lo_exp: f64, hi_exp: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| 10f64.powf(lo_exp + (hi_exp - lo_exp) * i as f64 / (n - 1) as f64)).collect()
}

/// Base seed from [`SEED_ENV`], or 0.
pub fn env_seed() -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => parse_num(SEED_ENV, &v),
        Err(_) => Ok(0),
    }
}

impl RunConfig {
    /// Defaults for `command` with seeds starting at `base_seed`.
    pub fn defaults(command: CommandKind, base_seed: u64) -> Self {
        let n_seeds = match command {
            CommandKind::Heatmap | CommandKind::TrainToy => 5,
            _ => 1,
        };
        let width = match command {
            CommandKind::Heatmap => 1024,
            _ => 128,
        };
        Self {
            command,
            activation: "relu".into(),
            depth: 2,
            width,
            ln: "none".into(),
            sigma_b: 0.1,
            parametrisation: Parametrisation::Ntk,
            dataset: ToyKind::Sine,
            n_points: 100,
            seeds: (base_seed..base_seed + n_seeds).collect(),
            grid_lo: -25.0,
            grid_hi: 25.0,
            grid_n: 51,
            norms: log_spaced(-2.0, 6.0, 33),
            lambdas: log_spaced(0.0, 6.0, 7),
            x: vec![1.0],
            xp: vec![1.0],
            order: 40,
            rho: 0.5,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 3000,
            scan_factor: 5.0,
            scan_points: if command == CommandKind::BoundCheck { 10_000 } else { 301 },
            output: None,
            format: match command {
                CommandKind::BoundCheck | CommandKind::Hermite => Format::Json,
                _ => Format::Csv,
            },
        }
    }

    /// Set one key from its string form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "command" => {
                let c = CommandKind::parse(v)?;
                if c != self.command {
                    return Err(Error::Config(format!("config is for '{}', not '{}'", c.name(), self.command.name())));
                }
            }
            "arch" => self.set_arch(v)?,
            "activation" => {
                self.activation = ActivationName::parse(v)?.label();
            }
            "depth" => self.depth = parse_num(&key, v)?,
            "width" => self.width = parse_num(&key, v)?,
            "ln" => self.ln = v.to_string(),
            "sigma_b" => self.sigma_b = parse_num(&key, v)?,
            "parametrisation" | "parameterization" => self.parametrisation = Parametrisation::parse(v)?,
            "dataset" => self.dataset = ToyKind::parse(v)?,
            "n_points" => self.n_points = parse_num(&key, v)?,
            "seeds" => self.seeds = parse_list(&key, v)?,
            "seed" => {
                let base: u64 = parse_num(&key, v)?;
                self.seeds = (base..base + self.seeds.len().max(1) as u64).collect();
            }
            "n_seeds" => {
                let n: u64 = parse_num(&key, v)?;
                let base = self.seeds.first().copied().unwrap_or(0);
                self.seeds = (base..base + n).collect();
            }
            "grid_lo" => self.grid_lo = parse_num(&key, v)?,
            "grid_hi" => self.grid_hi = parse_num(&key, v)?,
            "grid_n" => self.grid_n = parse_num(&key, v)?,
            "norms" => self.norms = parse_list(&key, v)?,
            "lambdas" => self.lambdas = parse_list(&key, v)?,
            "x" => self.x = parse_list(&key, v)?,
            "xp" | "x_prime" => self.xp = parse_list(&key, v)?,
            "order" => self.order = parse_num(&key, v)?,
            "rho" => self.rho = parse_num(&key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "gd" | "full_batch_gd" => Optimizer::FullBatchGd,
                    other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
                }
            }
            "learning_rate" | "lr" => self.learning_rate = parse_num(&key, v)?,
            "epochs" => self.epochs = parse_num(&key, v)?,
            "scan_factor" => self.scan_factor = parse_num(&key, v)?,
            "scan_points" => self.scan_points = parse_num(&key, v)?,
            "output" | "out" => self.output = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "format" => {
                self.format = match v {
                    "csv" => Format::Csv,
                    "json" => Format::Json,
                    other => return Err(Error::Config(format!("unknown format '{other}'"))),
                }
            }
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// `<activation>:<depth>`, or one of the depth-2 ReLU variants
    /// `standard`, `no_ln`, `ln_first`, `ln_mid`, `ln_every`.
    fn set_arch(&mut self, v: &str) -> Result<()> {
        let variant = match v.replace('-', "_").as_str() {
            "standard" | "no_ln" => Some("none"),
            "ln_first" => Some("0"),
            "ln_mid" => Some("1"),
            "ln_every" => Some("0,1"),
            _ => None,
        };
        if let Some(ln) = variant {
            self.activation = "relu".into();
            self.depth = 2;
            self.ln = ln.into();
            return Ok(());
        }
        let (act, depth) = v
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("arch must be <activation>:<depth> or a variant name, got '{v}'")))?;
        self.activation = ActivationName::parse(act)?.label();
        self.depth = parse_num("arch", depth)?;
        Ok(())
    }

    /// Apply `key=value` pairs in order, with `arch` and the seed keys
    /// first so the more specific keys can refine them.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let rank = |k: &str| match k.replace('-', "_").as_str() {
            "arch" => 0,
            "seed" => 1,
            "n_seeds" => 2,
            _ => 3,
        };
        let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
        sorted.sort_by_key(|(k, _)| rank(k));
        for (k, v) in sorted {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// One `key=value` line per field; [`RunConfig::from_kv`] reads it back.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        line("command", self.command.name().into());
        line("activation", self.activation.clone());
        line("depth", self.depth.to_string());
        line("width", self.width.to_string());
        line("ln", self.ln.clone());
        line("sigma_b", self.sigma_b.to_string());
        line(
            "parametrisation",
            match self.parametrisation {
                Parametrisation::Ntk => "ntk".into(),
                Parametrisation::Standard => "standard".into(),
            },
        );
        line("dataset", self.dataset.label().into());
        line("n_points", self.n_points.to_string());
        line("seeds", join(&self.seeds));
        line("grid_lo", self.grid_lo.to_string());
        line("grid_hi", self.grid_hi.to_string());
        line("grid_n", self.grid_n.to_string());
        line("norms", join(&self.norms));
        line("lambdas", join(&self.lambdas));
        line("x", join(&self.x));
        line("xp", join(&self.xp));
        line("order", self.order.to_string());
        line("rho", self.rho.to_string());
        line(
            "optimizer",
            match self.optimizer {
                Optimizer::Adam => "adam".into(),
                Optimizer::FullBatchGd => "gd".into(),
            },
        );
        line("learning_rate", self.learning_rate.to_string());
        line("epochs", self.epochs.to_string());
        line("scan_factor", self.scan_factor.to_string());
        line("scan_points", self.scan_points.to_string());
        line("output", self.output.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        line("format", if self.format == Format::Csv { "csv".into() } else { "json".into() });
        out
    }

    /// Parse a config file body on top of the defaults for `command`.
    pub fn from_kv(command: CommandKind, text: &str) -> Result<Self> {
        let mut cfg = Self::defaults(command, 0);
        cfg.apply(&parse_kv(text)?)?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Architecture on inputs of dimension `input_dim`.
    pub fn arch(&self, input_dim: usize) -> Result<ArchSpec> {
        let act = ActivationKind::new(ActivationName::parse(&self.activation)?)?;
        let ln = ArchSpec::parse_ln_positions(&self.ln, self.depth)?;
        ArchSpec::new(input_dim, self.depth, act, self.sigma_b)?.with_width(self.width)?.with_ln(ln)
    }

    fn toy_dataset(&self) -> ToyDatasetConfig {
        ToyDatasetConfig { n_points: self.n_points, ..ToyDatasetConfig::standard(self.dataset) }
    }

    fn scan(&self) -> Result<Vec<f64>> {
        if self.scan_points < 2 || !(self.scan_factor > 0.0) {
            return Err(Error::Config("scan needs at least 2 points and a positive factor".into()));
        }
        Ok(default_scan(&self.toy_dataset(), self.scan_factor, self.scan_points))
    }
}

/// Parse `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; key names are checked when the pairs are applied.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got '{l}'")))?;
            Ok((k.trim().replace('-', "_"), v.trim().to_string()))
        })
        .collect()
}

/// One CSV/JSON cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    F(f64),
    U(u64),
    B(bool),
    S(String),
    /// A vector input, written space-separated inside one CSV field.
    V(Vec<f64>),
}

/// Floats use 17 significant digits so they round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::F(v) => fmt_f64(*v),
            Cell::U(v) => v.to_string(),
            Cell::B(v) => v.to_string(),
            Cell::S(s) => s.clone(),
            Cell::V(v) => v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(" "),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::F(v) => json!(v),
            Cell::U(v) => json!(v),
            Cell::B(v) => json!(v),
            Cell::S(s) => json!(s),
            Cell::V(v) => json!(v),
        }
    }
}

/// A table, or a single-row report that renders as a JSON object.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    pub report: bool,
}

impl Output {
    fn table(header: Vec<&'static str>, rows: Vec<Vec<Cell>>) -> Self {
        Self { header, rows, report: false }
    }

    fn report(fields: Vec<(&'static str, Cell)>) -> Self {
        let (header, row): (Vec<_>, Vec<_>) = fields.into_iter().unzip();
        Self { header, rows: vec![row], report: true }
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.iter().map(Cell::csv).collect::<Vec<_>>().join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let obj = |row: &Vec<Cell>| -> Value {
            let mut m = Map::new();
            for (h, c) in self.header.iter().zip(row) {
                m.insert((*h).to_string(), c.json());
            }
            Value::Object(m)
        };
        if self.report {
            obj(&self.rows[0])
        } else {
            Value::Array(self.rows.iter().map(obj).collect())
        }
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => {
                let mut s = serde_json::to_string_pretty(&self.to_json()).expect("json renders");
                s.push('\n');
                s
            }
        }
    }

    /// Column by name.
    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.header.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

/// Primary output plus named companions (written next to the primary file).
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub primary: Output,
    pub companions: Vec<(&'static str, Output)>,
}

impl From<Output> for RunOutputs {
    fn from(primary: Output) -> Self {
        Self { primary, companions: Vec::new() }
    }
}

/// Execute a configuration without touching the filesystem.
pub fn execute(cfg: &RunConfig) -> Result<RunOutputs> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    match cfg.command {
        CommandKind::Kernel => {
            if cfg.x.len() != cfg.xp.len() {
                return Err(Error::DimensionMismatch { expected: cfg.x.len(), got: cfg.xp.len() });
            }
            let arch = cfg.arch(cfg.x.len())?;
            let theta = ntk(&arch, &cfg.x, &cfg.xp)?;
            let cell = |v: &[f64]| if v.len() == 1 { Cell::F(v[0]) } else { Cell::V(v.to_vec()) };
            Ok(Output::table(vec!["x", "x_prime", "theta"], vec![vec![cell(&cfg.x), cell(&cfg.xp), Cell::F(theta)]])
                .into())
        }
        CommandKind::Heatmap => {
            let xs = grid(cfg.grid_lo, cfg.grid_hi, cfg.grid_n)?;
            let h = heatmap_experiment(&cfg.arch(1)?, &xs, &cfg.seeds, cfg.parametrisation)?;
            let n = xs.len();
            let mut rows = Vec::with_capacity(n * n);
            let mut exact = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    rows.push(vec![
                        Cell::F(xs[i]),
                        Cell::F(xs[j]),
                        Cell::F(h.mean[(i, j)]),
                        Cell::F(h.sd[(i, j)]),
                        Cell::U(h.n_seeds as u64),
                    ]);
                    exact.push(vec![Cell::F(xs[i]), Cell::F(xs[j]), Cell::F(h.analytic[(i, j)])]);
                }
            }
            Ok(RunOutputs {
                primary: Output::table(vec!["x", "x_prime", "theta_mean", "theta_std", "n_seeds"], rows),
                companions: vec![("analytic", Output::table(vec!["x", "x_prime", "theta"], exact))],
            })
        }
        CommandKind::VarianceCurve => {
            let n = cfg.x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) {
                return Err(Error::Config("direction x must be non-zero".into()));
            }
            let dir: Vec<f64> = cfg.x.iter().map(|v| v / n).collect();
            let vals = variance_curve(&cfg.arch(dir.len())?, &dir, &cfg.norms)?;
            let rows = cfg.norms.iter().zip(vals).map(|(s, v)| vec![Cell::F(*s), Cell::F(v)]).collect();
            Ok(Output::table(vec!["norm", "theta_xx"], rows).into())
        }
        CommandKind::Homogeneity => {
            if cfg.x.len() != cfg.xp.len() {
                return Err(Error::DimensionMismatch { expected: cfg.x.len(), got: cfg.xp.len() });
            }
            let ratios = limit_ntk_ratio(&cfg.arch(cfg.x.len())?, &cfg.x, &cfg.xp, &cfg.lambdas)?;
            let rows = cfg.lambdas.iter().zip(ratios).map(|(l, r)| vec![Cell::F(*l), Cell::F(r)]).collect();
            Ok(Output::table(vec!["lambda", "ratio"], rows).into())
        }
        CommandKind::FitPredict => {
            let data = make_toy_dataset(&cfg.toy_dataset())?;
            let p = fit_default(&cfg.arch(1)?, &data)?;
            let rows = cfg
                .scan()?
                .iter()
                .map(|&x| Ok(vec![Cell::F(x), Cell::F(p.predict_mean(&[x])?), Cell::F(0.0)]))
                .collect::<Result<_>>()?;
            Ok(Output::table(vec!["x", "mean", "ci_half_width"], rows).into())
        }
        CommandKind::BoundCheck => bound_check(cfg).map(Into::into),
        CommandKind::TrainToy => {
            let exp = ToyExperimentConfig {
                dataset: cfg.toy_dataset(),
                width: cfg.width,
                train: TrainConfig {
                    optimizer: cfg.optimizer,
                    learning_rate: cfg.learning_rate,
                    epochs: cfg.epochs,
                    seed: 0,
                },
                seeds: cfg.seeds.clone(),
                scan: cfg.scan()?,
            };
            let (curve, losses) = toy_runs(&exp, &cfg.arch(1)?)?;
            let rows = curve.iter().map(|p| vec![Cell::F(p.x), Cell::F(p.mean), Cell::F(p.ci_half_width)]).collect();
            let loss_rows = cfg.seeds.iter().zip(losses).map(|(s, l)| vec![Cell::U(*s), Cell::F(l)]).collect();
            Ok(RunOutputs {
                primary: Output::table(vec!["x", "mean", "ci_half_width"], rows),
                companions: vec![("losses", Output::table(vec!["seed", "final_loss"], loss_rows))],
            })
        }
        CommandKind::Hermite => {
            let act = ActivationKind::new(ActivationName::parse(&cfg.activation)?)?;
            let series = act.hermite_coeffs(cfg.order)?.kappa_series(cfg.rho);
            let kappa = act.kappa(cfg.rho)?;
            Ok(Output::report(vec![
                ("activation", Cell::S(act.name().label())),
                ("order", Cell::U(cfg.order as u64)),
                ("rho", Cell::F(cfg.rho)),
                ("kappa_series", Cell::F(series)),
                ("kappa", Cell::F(kappa)),
                ("abs_diff", Cell::F((series - kappa).abs())),
            ])
            .into())
        }
    }
}

/// Scan the fitted predictor along both rays of the 1-D toy input out to
/// norm 1e6, `scan_points` evaluations in total.
fn bound_check(cfg: &RunConfig) -> Result<Output> {
    let data = make_toy_dataset(&cfg.toy_dataset())?;
    let p = fit_default(&cfg.arch(1)?, &data)?;
    let per_dir = (cfg.scan_points / 2).max(2);
    let norms = log_spaced(-3.0, 6.0, per_dir);
    let r = p.cross_norm_bound_check(&[vec![-1.0], vec![1.0]], &norms)?;
    Ok(Output::report(vec![
        ("dataset", Cell::S(cfg.dataset.label().into())),
        ("n_points", Cell::U(data.len() as u64)),
        ("points", Cell::U(r.points as u64)),
        ("max_abs_y", Cell::F(data.max_abs_y())),
        ("variance_constant", Cell::F(p.variance_constant())),
        ("lambda_min", Cell::F(p.lambda_min())),
        ("max_scanned_mean", Cell::F(r.max_abs_mean)),
        ("bound_rkhs", Cell::F(r.bound_rkhs)),
        ("bound_paper", Cell::F(r.bound_paper)),
        ("max_scanned_mean_le_bound_rkhs", Cell::B(r.max_abs_mean <= r.bound_rkhs)),
        ("max_kernel_norm", Cell::F(r.max_kernel_norm)),
        ("kernel_norm_limit", Cell::F(r.kernel_norm_limit)),
        ("kernel_norm_violations", Cell::U(r.kernel_norm_violations as u64)),
        ("cauchy_schwarz_limit", Cell::F(r.cauchy_schwarz_limit)),
        ("cauchy_schwarz_violations", Cell::U(r.cauchy_schwarz_violations as u64)),
        ("saturation_gap", Cell::F(r.saturation_gap)),
    ]))
}

/// `<stem>.<tag>.<ext>` next to `path`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}.{tag}"),
    };
    path.with_file_name(name)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Run and write outputs. Returns what would go to standard output.
pub fn run(cfg: &RunConfig) -> Result<String> {
    let start = Instant::now();
    if let Some(dir) = cfg.output.as_ref().and_then(|p| p.parent()).filter(|d| !d.as_os_str().is_empty()) {
        if !dir.is_dir() {
            return Err(Error::Io(format!("output directory {} does not exist", dir.display())));
        }
    }
    let out = execute(cfg)?;
    let Some(path) = &cfg.output else {
        return Ok(out.primary.render(cfg.format));
    };
    let mut written = vec![path.clone()];
    write_file(path, &out.primary.render(cfg.format))?;
    for (tag, o) in &out.companions {
        let p = sibling(path, tag);
        write_file(&p, &o.render(cfg.format))?;
        written.push(p);
    }
    let manifest = json!({
        "command": cfg.command.name(),
        "config": cfg,
        "config_hash": cfg.hash(),
        "seeds": cfg.seeds,
        "outputs": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "wall_time_s": start.elapsed().as_secs_f64(),
    });
    let mpath = path.with_extension("manifest.json");
    write_file(&mpath, &(serde_json::to_string_pretty(&manifest).expect("json renders") + "\n"))?;
    Ok(String::new())
}

#[derive(Debug, Parser)]
#[command(name = "ntkln", version, about = "Neural tangent kernels with layer normalisation: kernels, experiments and bound checks")]
pub struct Cli {
    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Analytic NTK for one input pair (x,x_prime,theta).
    Kernel(Opts),
    /// Seed-averaged empirical NTK on a 1-D grid, plus the analytic grid.
    Heatmap(Opts),
    /// Θ(x, x) along a ray (norm,theta_xx).
    VarianceCurve(Opts),
    /// Θ(λx, λx′) / λ^(2 n^L) for an architecture without layer norm (lambda,ratio).
    Homogeneity(Opts),
    /// Fit the infinite-width predictor on a toy dataset and scan it.
    FitPredict(Opts),
    /// Scan the fitted predictor and compare with the output bound.
    BoundCheck(Opts),
    /// Train finite networks on a toy dataset and scan their predictions.
    TrainToy(Opts),
    /// Truncated Hermite series of the dual activation against κ.
    Hermite(Opts),
}

/// Flags shared by every subcommand. Each one sets the config key of the
/// same name.
#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `<activation>:<depth>` or standard|ln_first|ln_mid|ln_every.
    #[arg(long, allow_hyphen_values = true)]
    pub arch: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub activation: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub depth: Option<String>,
    /// Hidden width of the finite networks.
    #[arg(long, allow_hyphen_values = true)]
    pub width: Option<String>,
    /// none|first|mid|last|every or a comma list of positions.
    #[arg(long, allow_hyphen_values = true)]
    pub ln: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub sigma_b: Option<String>,
    /// ntk|standard
    #[arg(long, allow_hyphen_values = true)]
    pub parametrisation: Option<String>,
    /// sine|linear|quadratic
    #[arg(long, allow_hyphen_values = true)]
    pub dataset: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub n_points: Option<String>,
    /// Base seed (defaults to $NTKLN_SEED or 0).
    #[arg(long, allow_hyphen_values = true)]
    pub seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub n_seeds: Option<String>,
    /// Explicit comma list of seeds.
    #[arg(long, allow_hyphen_values = true)]
    pub seeds: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_lo: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_hi: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid_n: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub norms: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub lambdas: Option<String>,
    /// Input (comma list for several dimensions).
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub xp: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub order: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub rho: Option<String>,
    /// adam|gd
    #[arg(long, allow_hyphen_values = true)]
    pub optimizer: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub learning_rate: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub epochs: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub scan_factor: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub scan_points: Option<String>,
    /// Output file; standard output when absent.
    #[arg(long, short = 'o', allow_hyphen_values = true)]
    pub out: Option<String>,
    /// csv|json
    #[arg(long, allow_hyphen_values = true)]
    pub format: Option<String>,
}

impl Opts {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields: [(&str, &Option<String>); 28] = [
            ("arch", &self.arch),
            ("activation", &self.activation),
            ("depth", &self.depth),
            ("width", &self.width),
            ("ln", &self.ln),
            ("sigma_b", &self.sigma_b),
            ("parametrisation", &self.parametrisation),
            ("dataset", &self.dataset),
            ("n_points", &self.n_points),
            ("seed", &self.seed),
            ("n_seeds", &self.n_seeds),
            ("seeds", &self.seeds),
            ("grid_lo", &self.grid_lo),
            ("grid_hi", &self.grid_hi),
            ("grid_n", &self.grid_n),
            ("norms", &self.norms),
            ("lambdas", &self.lambdas),
            ("x", &self.x),
            ("xp", &self.xp),
            ("order", &self.order),
            ("rho", &self.rho),
            ("optimizer", &self.optimizer),
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("scan_factor", &self.scan_factor),
            ("scan_points", &self.scan_points),
            ("output", &self.out),
            ("format", &self.format),
        ];
        fields.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect()
    }
}

impl Cmd {
    fn split(&self) -> (CommandKind, &Opts) {
        match self {
            Cmd::Kernel(o) => (CommandKind::Kernel, o),
            Cmd::Heatmap(o) => (CommandKind::Heatmap, o),
            Cmd::VarianceCurve(o) => (CommandKind::VarianceCurve, o),
            Cmd::Homogeneity(o) => (CommandKind::Homogeneity, o),
            Cmd::FitPredict(o) => (CommandKind::FitPredict, o),
            Cmd::BoundCheck(o) => (CommandKind::BoundCheck, o),
            Cmd::TrainToy(o) => (CommandKind::TrainToy, o),
            Cmd::Hermite(o) => (CommandKind::Hermite, o),
        }
    }
}

/// Resolve defaults, config file and flags into one configuration.
pub fn resolve(cmd: &Cmd) -> Result<RunConfig> {
    let (kind, opts) = cmd.split();
    let mut cfg = RunConfig::defaults(kind, env_seed()?);
    if let Some(path) = &opts.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        cfg.apply(&parse_kv(&text)?)?;
    }
    cfg.apply(&opts.pairs())?;
    Ok(cfg)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return 2;
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = resolve(&cli.command).and_then(|cfg| run(&cfg));
    match result {
        Ok(stdout) => {
            print!("{stdout}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
