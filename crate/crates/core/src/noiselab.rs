//! Quantization noise in backprop versus central-difference gradients.
//!
//! A linear chain `a_j = W_j a_{j-1}` is run with additive noise on weights
//! and activations. The derivative of the loss along a rank-one change
//! `W_l + t u wᵀ` is estimated two ways:
//!
//! - backprop: the chain of transposed Jacobians from the loss down to layer
//!   `l`, each factor with its own noise draw, so noise compounds with depth;
//! - central difference: two independent noisy forward passes at `t = ±Δ`,
//!   whose variance is set by the per-pass loss noise alone.

use std::num::NonZeroUsize;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Chain of square matrices, each a random orthogonal matrix times a fixed
/// norm, applied to a unit input.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearChainNet {
    pub weights: Vec<Array2<f64>>,
    pub x: Array1<f64>,
    pub spectral_norms: Vec<f64>,
    /// Unit vectors of the rank-one edit direction `u wᵀ`.
    pub u: Array1<f64>,
    pub w: Array1<f64>,
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.dot(&v).sqrt();
    v / n
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for j in 0..i {
                let c = q.row(j).dot(&v);
                v.scaled_add(-c, &q.row(j));
            }
        }
        let n = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / n));
    }
    q
}

impl LinearChainNet {
    /// `depth` matrices of size `d`, each with every singular value equal to
    /// `norm`.
    pub fn random(d: usize, depth: usize, norm: f64, seed: u64) -> Result<Self> {
        Self::with_norms(d, &vec![norm; depth], seed)
    }

    /// Chains built from the same seed share `x`, `u`, `w` and their leading
    /// matrices, so a deeper chain extends a shallower one.
    pub fn with_norms(d: usize, norms: &[f64], seed: u64) -> Result<Self> {
        if d == 0 || norms.is_empty() {
            return Err(Error::Config("chain needs d >= 1 and at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, u, w) = (unit(&mut rng, d), unit(&mut rng, d), unit(&mut rng, d));
        let weights = norms.iter().map(|&n| random_orthogonal(&mut rng, d) * n).collect();
        Ok(LinearChainNet { weights, x, spectral_norms: norms.to_vec(), u, w })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Noiseless output `W_L ... W_1 x`.
    pub fn output(&self) -> Array1<f64> {
        self.weights.iter().fold(self.x.clone(), |a, w| w.dot(&a))
    }

    fn check_edit_layer(&self, l: usize) -> Result<()> {
        if l + 1 >= self.depth() {
            return Err(Error::Config(format!(
                "edit layer {l} needs at least one layer above it in a chain of depth {}",
                self.depth()
            )));
        }
        Ok(())
    }

    /// Noiseless derivative of `loss` along `W_l + t u wᵀ` at `t = 0`.
    pub fn analytic_gradient(&self, l: usize, loss: &ChainLoss) -> Result<f64> {
        self.check_edit_layer(l)?;
        let quiet = NoiseSpec { sigma: 0.0, ..NoiseSpec::default() };
        Ok(bp_gradient_noisy(self, l, loss, &quiet, &mut ChaCha8Rng::seed_from_u64(0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    Gaussian,
    /// Uniform on `[-sqrt(3) sigma, sqrt(3) sigma]`.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub weights: bool,
    pub activations: bool,
    pub distribution: NoiseDistribution,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma: 1e-2, weights: true, activations: true, distribution: NoiseDistribution::Gaussian }
    }
}

impl NoiseSpec {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => {
                let z: f64 = StandardNormal.sample(rng);
                self.sigma * z
            }
            NoiseDistribution::Uniform => self.sigma * 3f64.sqrt() * rng.random_range(-1.0..1.0),
        }
    }

    fn noisy_matrix(&self, w: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
        if self.weights && self.sigma > 0.0 {
            w.mapv(|x| x + self.draw(rng))
        } else {
            w.clone()
        }
    }

    fn add_activation_noise(&self, a: &mut Array1<f64>, rng: &mut ChaCha8Rng) {
        if self.activations && self.sigma > 0.0 {
            a.mapv_inplace(|x| x + self.draw(rng));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainLoss {
    /// `½‖a_L‖²`.
    Quadratic,
    /// `cᵀ a_L`.
    Linear(Vec<f64>),
}

impl ChainLoss {
    pub fn value(&self, a: &Array1<f64>) -> f64 {
        match self {
            ChainLoss::Quadratic => 0.5 * a.dot(a),
            ChainLoss::Linear(c) => c.iter().zip(a).map(|(c, a)| c * a).sum(),
        }
    }

    fn grad(&self, a: &Array1<f64>) -> Array1<f64> {
        match self {
            ChainLoss::Quadratic => a.clone(),
            ChainLoss::Linear(c) => Array1::from_vec(c.clone()),
        }
    }
}

/// Per-layer noisy activations `a_1^q ... a_L^q`, with an optional rank-one
/// offset `t u wᵀ` added to layer `edit`.
fn noisy_pass(
    net: &LinearChainNet,
    noise: &NoiseSpec,
    edit: Option<(usize, f64)>,
    rng: &mut ChaCha8Rng,
) -> Vec<Array1<f64>> {
    let mut acts = Vec::with_capacity(net.depth());
    let mut a = net.x.clone();
    for (j, w) in net.weights.iter().enumerate() {
        let wq = noise.noisy_matrix(w, rng);
        let mut next = wq.dot(&a);
        if let Some((l, t)) = edit.filter(|&(l, _)| l == j) {
            let _ = l;
            next.scaled_add(t * net.w.dot(&a), &net.u);
        }
        noise.add_activation_noise(&mut next, rng);
        acts.push(next.clone());
        a = next;
    }
    acts
}

/// Output `a_L^q` of one pass with fresh noise.
pub fn forward_noisy(net: &LinearChainNet, noise: &NoiseSpec, rng: &mut ChaCha8Rng) -> Array1<f64> {
    noisy_pass(net, noise, None, rng).pop().expect("depth >= 1")
}

/// Backprop derivative along `u wᵀ` at layer `l` (0-based), from one noisy
/// forward pass and a backward chain whose every Jacobian factor
/// `W_j + ε_j` gets an independent noise draw.
pub fn bp_gradient_noisy(
    net: &LinearChainNet,
    l: usize,
    loss: &ChainLoss,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let acts = noisy_pass(net, noise, None, rng);
    let below = if l == 0 { &net.x } else { &acts[l - 1] };
    let mut g = loss.grad(acts.last().expect("depth >= 1"));
    for w in net.weights[l + 1..].iter().rev() {
        g = noise.noisy_matrix(w, rng).t().dot(&g);
    }
    g.dot(&net.u) * net.w.dot(below)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZONoiseEstimate {
    pub g: f64,
    pub delta: f64,
    /// Realized loss noise of the `+Δ` and `−Δ` passes.
    pub eta_plus: f64,
    pub eta_minus: f64,
}

/// Central difference from two independent noisy passes at `W_l ± Δ u wᵀ`.
pub fn zo_gradient_noisy(
    net: &LinearChainNet,
    l: usize,
    delta: f64,
    loss: &ChainLoss,
    noise: &NoiseSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ZONoiseEstimate> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let quiet = NoiseSpec { sigma: 0.0, ..*noise };
    let eval = |t: f64, rng: &mut ChaCha8Rng| {
        let noisy = loss.value(noisy_pass(net, noise, Some((l, t)), rng).last().unwrap());
        let clean = loss.value(noisy_pass(net, &quiet, Some((l, t)), rng).last().unwrap());
        (noisy, noisy - clean)
    };
    let (lp, eta_plus) = eval(delta, rng);
    let (lm, eta_minus) = eval(-delta, rng);
    Ok(ZONoiseEstimate { g: (lp - lm) / (2.0 * delta), delta, eta_plus, eta_minus })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    pub trials: usize,
    pub noise: NoiseSpec,
    pub norm: f64,
    pub d: usize,
    pub delta: f64,
    /// Layer being differentiated (0-based).
    pub edit_layer: usize,
    pub loss: ChainLoss,
    pub seed: u64,
    pub threads: NonZeroUsize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            depths: vec![2, 4, 8, 16],
            trials: 1000,
            noise: NoiseSpec::default(),
            norm: 1.2,
            d: 32,
            delta: 1e-3,
            edit_layer: 0,
            loss: ChainLoss::Quadratic,
            seed: 0,
            threads: NonZeroUsize::MIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    /// Sum over the backward factors of `log ‖W_j‖²`.
    pub log_norm_product: f64,
    pub analytic: f64,
    pub mean_bp: f64,
    pub var_bp: f64,
    pub mean_zo: f64,
    pub var_zo: f64,
    pub var_ratio: f64,
    /// Variance of the loss of a single noisy pass at unperturbed weights.
    pub sigma_loss_sq: f64,
    /// `var_zo · 2Δ² / σ_ℒ²`, 1 when the estimate carries only per-pass noise.
    pub normalized_zo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "depth,var_bp,var_zo,var_ratio,sigma_loss_sq,normalized_zo,mean_bp,mean_zo,analytic,log_norm_product\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e},{}\n",
                r.depth,
                r.var_bp,
                r.var_zo,
                r.var_ratio,
                r.sigma_loss_sq,
                r.normalized_zo,
                r.mean_bp,
                r.mean_zo,
                r.analytic,
                r.log_norm_product
            ));
        }
        out
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn trial_seed(seed: u64, depth: usize, stream: u64, trial: usize) -> u64 {
    mix(mix(mix(seed ^ depth as u64) ^ stream) ^ trial as u64)
}

/// Runs `f(trial)` for every trial, split over up to `threads` scoped
/// threads. Results come back in trial order.
fn run_trials<T: Send>(trials: usize, threads: NonZeroUsize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = threads.get().min(trials.max(1));
    if threads == 1 {
        return (0..trials).map(f).collect();
    }
    let chunk = trials.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(trials)).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("trial thread panicked")).collect()
    })
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

pub fn variance_sweep(config: &SweepConfig) -> Result<SweepReport> {
    if config.trials < 100 {
        return Err(Error::Config(format!("need at least 100 trials, got {}", config.trials)));
    }
    if !(config.noise.sigma >= 0.0) {
        return Err(Error::Config("sigma must be nonnegative".into()));
    }
    let mut rows = Vec::with_capacity(config.depths.len());
    for &depth in &config.depths {
        let net = LinearChainNet::random(config.d, depth, config.norm, mix(config.seed))?;
        net.check_edit_layer(config.edit_layer)?;
        let l = config.edit_layer;
        let analytic = net.analytic_gradient(l, &config.loss)?;
        let seed = |stream, t| ChaCha8Rng::seed_from_u64(trial_seed(config.seed, depth, stream, t));
        let bp = run_trials(config.trials, config.threads, |t| {
            bp_gradient_noisy(&net, l, &config.loss, &config.noise, &mut seed(1, t))
        });
        let zo = run_trials(config.trials, config.threads, |t| {
            zo_gradient_noisy(&net, l, config.delta, &config.loss, &config.noise, &mut seed(2, t)).map(|e| e.g)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let losses = run_trials(2 * config.trials, config.threads, |t| {
            config.loss.value(&forward_noisy(&net, &config.noise, &mut seed(3, t)))
        });
        let (mean_bp, var_bp) = mean_var(&bp);
        let (mean_zo, var_zo) = mean_var(&zo);
        let (_, sigma_loss_sq) = mean_var(&losses);
        let normalized_zo =
            if sigma_loss_sq > 0.0 { var_zo * 2.0 * config.delta * config.delta / sigma_loss_sq } else { f64::NAN };
        rows.push(SweepRow {
            depth,
            log_norm_product: net.spectral_norms[l + 1..].iter().map(|n| (n * n).ln()).sum(),
            analytic,
            mean_bp,
            var_bp,
            mean_zo,
            var_zo,
            var_ratio: if var_zo > 0.0 { var_bp / var_zo } else { f64::NAN },
            sigma_loss_sq,
            normalized_zo,
        });
    }
    Ok(SweepReport { config: config.clone(), rows })
}

/// Least-squares slope of `y` on `x`.
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn orthogonal_factors_have_requested_norm() {
        let net = LinearChainNet::random(16, 3, 1.2, 4).unwrap();
        for w in &net.weights {
            let g = w.t().dot(w);
            for i in 0..16 {
                for j in 0..16 {
                    let e = if i == j { 1.44 } else { 0.0 };
                    assert!((g[(i, j)] - e).abs() < 1e-10);
                }
            }
        }
        assert!((net.output().dot(&net.output()).sqrt() - 1.2f64.powi(3)).abs() < 1e-10);
    }

    #[test]
    fn noiseless_pass_is_exact_product() {
        let net = LinearChainNet::random(8, 4, 1.1, 1).unwrap();
        let quiet = NoiseSpec { sigma: 0.0, ..Default::default() };
        assert_eq!(forward_noisy(&net, &quiet, &mut rng(0)), net.output());
    }

    #[test]
    fn noiseless_gradients_agree() {
        let net = LinearChainNet::random(8, 5, 1.2, 2).unwrap();
        let quiet = NoiseSpec { sigma: 0.0, ..Default::default() };
        for l in 0..4 {
            let exact = {
                // Directional derivative of ½‖a_L‖² by hand.
                let mut below = net.x.clone();
                for w in &net.weights[..l] {
                    below = w.dot(&below);
                }
                let mut above = Array2::<f64>::eye(8);
                for w in &net.weights[l + 1..] {
                    above = w.dot(&above);
                }
                let out = net.output();
                above.dot(&net.u).dot(&out) * net.w.dot(&below)
            };
            let bp = bp_gradient_noisy(&net, l, &ChainLoss::Quadratic, &quiet, &mut rng(0));
            let zo = zo_gradient_noisy(&net, l, 1e-3, &ChainLoss::Quadratic, &quiet, &mut rng(0)).unwrap();
            assert!((bp - exact).abs() <= 1e-8 * exact.abs());
            assert!((zo.g - exact).abs() <= 1e-8 * exact.abs());
            assert_eq!(zo.eta_plus, 0.0);
        }
    }

    #[test]
    fn single_layer_weight_noise_variance() {
        let net = LinearChainNet::random(6, 1, 1.0, 3).unwrap();
        let noise = NoiseSpec { sigma: 0.05, activations: false, ..Default::default() };
        let mut r = rng(9);
        let samples: Vec<Array1<f64>> = (0..10_000).map(|_| forward_noisy(&net, &noise, &mut r)).collect();
        let expected = 0.05f64.powi(2) * net.x.dot(&net.x);
        for i in 0..6 {
            let col: Vec<f64> = samples.iter().map(|a| a[i]).collect();
            let (_, var) = mean_var(&col);
            assert!((var / expected - 1.0).abs() < 0.06, "coord {i}: {var} vs {expected}");
        }
    }

    #[test]
    fn uniform_noise_has_requested_variance() {
        let noise = NoiseSpec { sigma: 0.1, distribution: NoiseDistribution::Uniform, ..Default::default() };
        let mut r = rng(5);
        let xs: Vec<f64> = (0..50_000).map(|_| noise.draw(&mut r)).collect();
        let (_, var) = mean_var(&xs);
        assert!((var / 0.01 - 1.0).abs() < 0.03);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let base = SweepConfig { depths: vec![2, 3], trials: 100, d: 8, ..Default::default() };
        let a = variance_sweep(&base).unwrap();
        let b = variance_sweep(&SweepConfig { threads: NonZeroUsize::new(3).unwrap(), ..base.clone() }).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.to_csv().lines().count(), 3);
    }

    #[test]
    fn zero_sigma_gives_zero_variance() {
        let cfg = SweepConfig {
            depths: vec![2, 4],
            trials: 100,
            noise: NoiseSpec { sigma: 0.0, ..Default::default() },
            ..Default::default()
        };
        for r in variance_sweep(&cfg).unwrap().rows {
            assert!(r.var_bp <= 1e-20 && r.var_zo <= 1e-20, "{r:?}");
        }
        assert!(variance_sweep(&SweepConfig { trials: 99, ..cfg }).is_err());
    }

    #[test]
    fn edit_layer_needs_a_layer_above() {
        let net = LinearChainNet::random(4, 2, 1.0, 0).unwrap();
        assert!(net.analytic_gradient(1, &ChainLoss::Quadratic).is_err());
        assert!(net.analytic_gradient(0, &ChainLoss::Quadratic).is_ok());
    }
}
