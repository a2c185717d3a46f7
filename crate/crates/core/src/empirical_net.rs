//! Finite-width fully-connected networks with hand-written forward and
//! backward passes, including the exact layer-norm Jacobian.
//!
//! Parameters live in one flat vector ordered `W⁽¹⁾, b⁽¹⁾, …, W⁽ᴸ⁺¹⁾, b⁽ᴸ⁺¹⁾`
//! with every `W` stored row-major as `fan_out × fan_in`. The same order is
//! used for gradients, so optimisers can work on plain slices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic_ntk::ArchSpec;
use crate::numerics::{sample_normal, Matrix, RngStream};
use crate::{Error, Result};

/// Layer norm refuses inputs whose spread is below this.
pub const LN_MIN_SIGMA: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrisation {
    /// Unit Gaussian parameters with `1/sqrt(fan_in)` and `σ_b` multipliers
    /// in the forward pass and `sqrt(c_φ)` on every activation. Empirical
    /// kernels converge to the analytic NTK in this mode.
    Ntk,
    /// He-initialised weights, `N(0, σ_b²)` biases, no multipliers.
    Standard,
}

impl Parametrisation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "ntk" => Ok(Self::Ntk),
            "standard" => Ok(Self::Standard),
            other => Err(Error::Config(format!("unknown parametrisation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

/// Intermediates of one forward pass. Index `i` of `z`, `zt` and `sigma`
/// refers to hidden layer `i + 1`; `xi[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub z: Vec<Vec<f64>>,
    pub zt: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNet {
    arch: ArchSpec,
    param: Parametrisation,
    params: Vec<f64>,
    shapes: Vec<LayerShape>,
    cache: Option<(Vec<f64>, ForwardCache)>,
}

fn shapes_for(arch: &ArchSpec) -> Vec<LayerShape> {
    let mut dims = vec![arch.input_dim];
    dims.extend(&arch.hidden_widths);
    dims.push(1);
    let mut off = 0;
    dims.windows(2)
        .map(|d| {
            let s = LayerShape { fan_in: d[0], fan_out: d[1], w_off: off, b_off: off + d[0] * d[1] };
            off += d[0] * d[1] + d[1];
            s
        })
        .collect()
}

fn check_arch(arch: &ArchSpec) -> Result<()> {
    arch.validate()?;
    if !(arch.sigma_b > 0.0) {
        return Err(Error::InvalidArch("finite networks need sigma_b > 0".into()));
    }
    Ok(())
}

/// Draw fresh parameters. Every layer's weights and biases come from their
/// own split of `stream`, so widths can change without reshuffling the rest.
pub fn init_net(arch: &ArchSpec, param: Parametrisation, stream: &RngStream) -> Result<FiniteNet> {
    check_arch(arch)?;
    let shapes = shapes_for(arch);
    let mut params = Vec::with_capacity(shapes.last().map_or(0, |s| s.b_off + s.fan_out));
    for (i, s) in shapes.iter().enumerate() {
        let mut w = sample_normal(&mut stream.split(2 * i as u64), s.fan_in * s.fan_out);
        let mut b = sample_normal(&mut stream.split(2 * i as u64 + 1), s.fan_out);
        if param == Parametrisation::Standard {
            let w_sd = (2.0 / s.fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v *= w_sd);
            b.iter_mut().for_each(|v| *v *= arch.sigma_b);
        }
        params.extend(w);
        params.extend(b);
    }
    Ok(FiniteNet { arch: arch.clone(), param, params, shapes, cache: None })
}

impl FiniteNet {
    /// A network with the given flat parameter vector.
    pub fn from_params(arch: &ArchSpec, param: Parametrisation, params: Vec<f64>) -> Result<Self> {
        check_arch(arch)?;
        let shapes = shapes_for(arch);
        let n = shapes.last().map_or(0, |s| s.b_off + s.fan_out);
        if params.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: params.len() });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self { arch: arch.clone(), param, params, shapes, cache: None })
    }

    pub fn zeros(arch: &ArchSpec, param: Parametrisation) -> Result<Self> {
        check_arch(arch)?;
        let n = shapes_for(arch).last().map_or(0, |s| s.b_off + s.fan_out);
        Self::from_params(arch, param, vec![0.0; n])
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn parametrisation(&self) -> Parametrisation {
        self.param
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Invalidates the forward cache.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    /// Number of linear maps, `depth + 1`.
    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// Row-major `fan_out × fan_in` weights of linear map `i` (0-based).
    pub fn weight(&self, i: usize) -> &[f64] {
        let s = self.shapes[i];
        &self.params[s.w_off..s.b_off]
    }

    pub fn bias(&self, i: usize) -> &[f64] {
        let s = self.shapes[i];
        &self.params[s.b_off..s.b_off + s.fan_out]
    }

    /// `(weight multiplier, bias multiplier)` for linear map `i`.
    fn multipliers(&self, i: usize) -> (f64, f64) {
        match self.param {
            Parametrisation::Ntk => (1.0 / (self.shapes[i].fan_in as f64).sqrt(), self.arch.sigma_b),
            Parametrisation::Standard => (1.0, 1.0),
        }
    }

    fn act_scale(&self) -> f64 {
        match self.param {
            Parametrisation::Ntk => self.arch.activation.c_phi().sqrt(),
            Parametrisation::Standard => 1.0,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Forward pass without touching the cache.
    pub fn forward_pass(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let depth = self.arch.depth;
        let act = &self.arch.activation;
        let scale = self.act_scale();
        let mut cache = ForwardCache {
            z: Vec::with_capacity(depth),
            zt: Vec::with_capacity(depth),
            sigma: Vec::with_capacity(depth),
            xi: vec![x.to_vec()],
            output: 0.0,
        };
        for i in 0..=depth {
            let s = self.shapes[i];
            let (pw, pb) = self.multipliers(i);
            let w = self.weight(i);
            let b = self.bias(i);
            let prev = &cache.xi[i];
            let z: Vec<f64> = (0..s.fan_out)
                .map(|r| pw * dot(&w[r * s.fan_in..(r + 1) * s.fan_in], prev) + pb * b[r])
                .collect();
            if i == depth {
                cache.output = z[0];
                break;
            }
            let (zt, sigma) = if self.arch.ln_positions.contains(&i) {
                let (zt, sigma) = layer_norm(&z).ok_or(Error::LnZeroSigma(i))?;
                (zt, sigma)
            } else {
                (z.clone(), 1.0)
            };
            cache.xi.push(zt.iter().map(|&v| scale * act.phi(v)).collect());
            cache.z.push(z);
            cache.zt.push(zt);
            cache.sigma.push(sigma);
        }
        if !cache.output.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(cache)
    }

    /// Scalar output; the intermediates are kept for [`Self::grad_params`].
    pub fn forward(&mut self, x: &[f64]) -> Result<f64> {
        let cache = self.forward_pass(x)?;
        let out = cache.output;
        self.cache = Some((x.to_vec(), cache));
        Ok(out)
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_pass(x)?.output)
    }

    /// Intermediates from the last [`Self::forward`] call.
    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref().map(|(_, c)| c)
    }

    /// Output gradients `∂f/∂z⁽ⁱ⁾` for every linear map, from a forward cache.
    fn backward(&self, cache: &ForwardCache) -> Vec<Vec<f64>> {
        let depth = self.arch.depth;
        let act = &self.arch.activation;
        let scale = self.act_scale();
        let mut deltas = vec![Vec::new(); depth + 1];
        deltas[depth] = vec![1.0];
        for i in (0..depth).rev() {
            let next = &deltas[i + 1];
            let s = self.shapes[i + 1];
            let (pw, _) = self.multipliers(i + 1);
            let w = self.weight(i + 1);
            // gradient with respect to the post-activation of hidden layer i+1
            let mut g = vec![0.0; s.fan_in];
            for (r, d) in next.iter().enumerate() {
                if *d != 0.0 {
                    let row = &w[r * s.fan_in..(r + 1) * s.fan_in];
                    g.iter_mut().zip(row).for_each(|(gj, wj)| *gj += pw * d * wj);
                }
            }
            let zt = &cache.zt[i];
            g.iter_mut().zip(zt).for_each(|(gj, &z)| *gj *= scale * act.phi_dot(z));
            if self.arch.ln_positions.contains(&i) {
                g = layer_norm_backward(&g, zt, cache.sigma[i]);
            }
            deltas[i] = g;
        }
        deltas
    }

    /// Gradient of the output at `x` with respect to every parameter.
    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_pass(x)?;
        Ok(self.assemble_gradient(&cache))
    }

    /// Like [`Self::gradient`], reusing the cached forward pass when it was
    /// run on the same `x`.
    pub fn grad_params(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.cache {
            Some((cx, cache)) if cx.as_slice() == x => Ok(self.assemble_gradient(cache)),
            _ => {
                self.forward(x)?;
                let (_, cache) = self.cache.as_ref().expect("cache set by forward");
                Ok(self.assemble_gradient(cache))
            }
        }
    }

    fn assemble_gradient(&self, cache: &ForwardCache) -> Vec<f64> {
        let deltas = self.backward(cache);
        let mut grad = vec![0.0; self.params.len()];
        for (i, s) in self.shapes.iter().enumerate() {
            let (pw, pb) = self.multipliers(i);
            let prev = &cache.xi[i];
            for (r, d) in deltas[i].iter().enumerate() {
                let row = &mut grad[s.w_off + r * s.fan_in..s.w_off + (r + 1) * s.fan_in];
                row.iter_mut().zip(prev).for_each(|(g, p)| *g = pw * d * p);
                grad[s.b_off + r] = pb * d;
            }
        }
        grad
    }

    /// Per-layer `(∂f/∂z⁽ⁱ⁾, ξ⁽ⁱ⁻¹⁾)` pairs. The empirical NTK factorises
    /// over layers into products of their inner products.
    pub fn ntk_features(&self, x: &[f64]) -> Result<NtkFeatures> {
        let cache = self.forward_pass(x)?;
        let deltas = self.backward(&cache);
        let multipliers = (0..self.shapes.len()).map(|i| self.multipliers(i)).collect();
        Ok(NtkFeatures { deltas, inputs: cache.xi, multipliers })
    }

    /// `⟨∇θ f(x), ∇θ f(x′)⟩`.
    pub fn empirical_ntk(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        Ok(self.ntk_features(x)?.dot(&self.ntk_features(xp)?))
    }

    /// Empirical NTK Gram over the rows of `xs`.
    pub fn empirical_gram(&self, xs: &Matrix) -> Result<Matrix> {
        let feats: Vec<NtkFeatures> =
            (0..xs.rows()).into_par_iter().map(|i| self.ntk_features(xs.row(i))).collect::<Result<_>>()?;
        Ok(symmetric_from(xs.rows(), |i, j| feats[i].dot(&feats[j])))
    }

    /// Outputs for every row of `xs`, batched through matrix products.
    pub fn predict_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.batch_forward(xs)?.output)
    }

    /// Mean squared error over `(xs, ys)` and its gradient with respect to the
    /// flat parameter vector.
    pub fn mse_and_grad(&self, xs: &Matrix, ys: &[f64]) -> Result<(f64, Vec<f64>)> {
        if ys.len() != xs.rows() {
            return Err(Error::DimensionMismatch { expected: xs.rows(), got: ys.len() });
        }
        let n = xs.rows();
        let fwd = self.batch_forward(xs)?;
        let resid: Vec<f64> = fwd.output.iter().zip(ys).map(|(f, y)| f - y).collect();
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;

        let depth = self.arch.depth;
        let act = &self.arch.activation;
        let scale = self.act_scale();
        let mut grad = vec![0.0; self.params.len()];
        // delta holds ∂loss/∂z for the current linear map, batch × fan_out
        let mut delta: Vec<f64> = resid.iter().map(|r| 2.0 * r / n as f64).collect();
        for i in (0..=depth).rev() {
            let s = self.shapes[i];
            let (pw, pb) = self.multipliers(i);
            let prev = &fwd.xi[i];
            // dW = pw · deltaᵀ · prev
            gemm(
                s.fan_out,
                n,
                s.fan_in,
                pw,
                (&delta, 1, s.fan_out as isize),
                (prev, s.fan_in as isize, 1),
                0.0,
                (&mut grad[s.w_off..s.b_off], s.fan_in as isize, 1),
            );
            for r in 0..s.fan_out {
                grad[s.b_off + r] = pb * (0..n).map(|b| delta[b * s.fan_out + r]).sum::<f64>();
            }
            if i == 0 {
                break;
            }
            // gradient with respect to the previous post-activation
            let mut g = vec![0.0; n * s.fan_in];
            gemm(
                n,
                s.fan_out,
                s.fan_in,
                pw,
                (&delta, s.fan_out as isize, 1),
                (self.weight(i), s.fan_in as isize, 1),
                0.0,
                (&mut g, s.fan_in as isize, 1),
            );
            let h = i - 1;
            let width = s.fan_in;
            let zt = &fwd.zt[h];
            g.iter_mut().zip(zt).for_each(|(gj, &z)| *gj *= scale * act.phi_dot(z));
            if self.arch.ln_positions.contains(&h) {
                for b in 0..n {
                    let rows = b * width..(b + 1) * width;
                    let back = layer_norm_backward(&g[rows.clone()], &zt[rows.clone()], fwd.sigma[h][b]);
                    g[rows].copy_from_slice(&back);
                }
            }
            delta = g;
        }
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((loss, grad))
    }

    fn batch_forward(&self, xs: &Matrix) -> Result<BatchForward> {
        if xs.cols() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: xs.cols() });
        }
        let n = xs.rows();
        let depth = self.arch.depth;
        let act = &self.arch.activation;
        let scale = self.act_scale();
        let mut fwd = BatchForward { xi: vec![xs.data().to_vec()], zt: Vec::new(), sigma: Vec::new(), output: Vec::new() };
        for i in 0..=depth {
            let s = self.shapes[i];
            let (pw, pb) = self.multipliers(i);
            let b = self.bias(i);
            let mut z: Vec<f64> = (0..n).flat_map(|_| b.iter().map(|v| pb * v)).collect();
            // z += pw · prev · Wᵀ
            gemm(
                n,
                s.fan_in,
                s.fan_out,
                pw,
                (&fwd.xi[i], s.fan_in as isize, 1),
                (self.weight(i), 1, s.fan_in as isize),
                1.0,
                (&mut z, s.fan_out as isize, 1),
            );
            if i == depth {
                fwd.output = z;
                break;
            }
            let mut sig = vec![1.0; n];
            if self.arch.ln_positions.contains(&i) {
                for (row, sg) in z.chunks_mut(s.fan_out).zip(sig.iter_mut()) {
                    let (zt, sigma) = layer_norm(row).ok_or(Error::LnZeroSigma(i))?;
                    row.copy_from_slice(&zt);
                    *sg = sigma;
                }
            }
            fwd.xi.push(z.iter().map(|&v| scale * act.phi(v)).collect());
            fwd.zt.push(z);
            fwd.sigma.push(sig);
        }
        if fwd.output.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(fwd)
    }
}

struct BatchForward {
    xi: Vec<Vec<f64>>,
    zt: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// `c = alpha · a · b + beta · c` on strided row-major views, with `a` of
/// shape `m × k` and `b` of shape `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.0.len() >= m * n);
    // SAFETY: the asserts above bound every index reachable from the shapes
    // and strides passed by the callers in this module
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// Ingredients of the layerwise empirical NTK for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkFeatures {
    pub deltas: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    multipliers: Vec<(f64, f64)>,
}

impl NtkFeatures {
    /// `Σᵢ ⟨δᵢ, δ′ᵢ⟩ (pwᵢ² ⟨ξᵢ₋₁, ξ′ᵢ₋₁⟩ + pbᵢ²)`, the inner product of the
    /// two full parameter gradients.
    pub fn dot(&self, other: &NtkFeatures) -> f64 {
        self.deltas
            .iter()
            .zip(&other.deltas)
            .zip(self.inputs.iter().zip(&other.inputs))
            .zip(&self.multipliers)
            .map(|(((d, dp), (x, xp)), (pw, pb))| dot(d, dp) * (pw * pw * dot(x, xp) + pb * pb))
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn symmetric_from(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Matrix {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<f64> = pairs.par_iter().map(|&(i, j)| f(i, j)).collect();
    let mut g = Matrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        g[(i, j)] = v;
        g[(j, i)] = v;
    }
    g
}

/// `((z - μ)/σ, σ)` with the population standard deviation, or `None` when
/// `σ` is below [`LN_MIN_SIGMA`].
pub fn layer_norm(z: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma >= LN_MIN_SIGMA) {
        return None;
    }
    Some((z.iter().map(|v| (v - mu) / sigma).collect(), sigma))
}

/// `Jᵀg` for the layer-norm Jacobian `J = (I − 11ᵀ/n − z̃z̃ᵀ/n)/σ`, which
/// is symmetric.
pub fn layer_norm_backward(g: &[f64], zt: &[f64], sigma: f64) -> Vec<f64> {
    let n = g.len() as f64;
    let mean_g = g.iter().sum::<f64>() / n;
    let mean_gz = dot(g, zt) / n;
    g.iter().zip(zt).map(|(gi, zi)| (gi - mean_g - zi * mean_gz) / sigma).collect()
}

/// The layer-norm Jacobian as a dense matrix.
pub fn layer_norm_jacobian(zt: &[f64], sigma: f64) -> Matrix {
    let n = zt.len();
    Matrix::from_fn(n, n, |i, j| {
        let eye = if i == j { 1.0 } else { 0.0 };
        (eye - 1.0 / n as f64 - zt[i] * zt[j] / n as f64) / sigma
    })
}

/// Stream used to initialise the network for `seed`.
pub fn init_stream(seed: u64) -> RngStream {
    RngStream::new(seed, 0x6e6574)
}

/// Seed-averaged empirical NTK over the rows of `xs`. Seeds run in parallel
/// and are summed in the given order, so the result does not depend on
/// scheduling.
pub fn empirical_ntk_grid(
    arch: &ArchSpec,
    param: Parametrisation,
    xs: &Matrix,
    seeds: &[u64],
) -> Result<Matrix> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let grams: Vec<Matrix> = seeds
        .par_iter()
        .map(|&s| init_net(arch, param, &init_stream(s))?.empirical_gram(xs))
        .collect::<Result<_>>()?;
    let n = xs.rows();
    let k = seeds.len() as f64;
    Ok(Matrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        grams.iter().map(|g| g[(a, b)]).sum::<f64>() / k
    }))
}

/// Seed-wise standard deviation of the empirical NTK, alongside the mean.
pub fn empirical_ntk_grid_stats(
    arch: &ArchSpec,
    param: Parametrisation,
    xs: &Matrix,
    seeds: &[u64],
) -> Result<(Matrix, Matrix)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is needed".into()));
    }
    let grams: Vec<Matrix> = seeds
        .par_iter()
        .map(|&s| init_net(arch, param, &init_stream(s))?.empirical_gram(xs))
        .collect::<Result<_>>()?;
    let n = xs.rows();
    let k = seeds.len() as f64;
    let mean = Matrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        grams.iter().map(|g| g[(a, b)]).sum::<f64>() / k
    });
    let sd = Matrix::from_fn(n, n, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        if grams.len() < 2 {
            return 0.0;
        }
        let m = mean[(a, b)];
        (grams.iter().map(|g| (g[(a, b)] - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    });
    Ok((mean, sd))
}
