//! Bayesian arrival curve learner.
//!
//! A feedforward network whose weights carry independent Gaussian posteriors
//! `N(mu, softplus(rho)^2)`. Training minimizes the negative ELBO with one
//! reparameterized draw per step. The last layer has two outputs: the mean
//! head and a raw scale passed through softplus to give the aleatoric
//! standard deviation. In deterministic mode every draw is the posterior mean
//! and the KL term is dropped, which is the plain network baseline.

mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::features::{FeatureMode, Normalizer};
use crate::seed::rng_from;

pub use train::{EpochStats, Optimizer, TrainReport};

const ARTIFACT_FORMAT: &str = "bacl-model";
const ARTIFACT_VERSION: u32 = 1;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Closed-form `KL(N(mu, s^2) || N(0, p^2))`.
pub fn gaussian_kl(mu: f64, s: f64, p: f64) -> f64 {
    (p / s).ln() + (s * s + mu * mu) / (2.0 * p * p) - 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    #[default]
    Bayesian,
    Deterministic,
}

/// Dense layer with a factorized Gaussian posterior.
///
/// `mu` and `rho` are row-major `n_out x (n_in + 1)`; the last column of each
/// row is the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl VariationalLayer {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, init_range: f64, init_rho: f64, rng: &mut R) -> Self {
        let len = n_out * (n_in + 1);
        let mu = if init_range > 0.0 {
            let u = Uniform::new(-init_range, init_range).expect("non-empty range");
            (0..len).map(|_| u.sample(rng)).collect()
        } else {
            vec![0.0; len]
        };
        Self {
            n_in,
            n_out,
            mu,
            rho: vec![init_rho; len],
        }
    }

    pub fn stride(&self) -> usize {
        self.n_in + 1
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn posterior_std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// `mu + softplus(rho) * eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect()
    }

    pub fn kl(&self, prior_std: f64) -> f64 {
        self.mu
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| gaussian_kl(*m, softplus(*r), prior_std))
            .sum()
    }
}

/// Standard-normal noise shaped like the model's layers.
pub type Noise = Vec<Vec<f64>>;

/// Gradient of the loss with respect to every `mu` and `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub mu: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(layers: &[VariationalLayer]) -> Self {
        Self {
            mu: layers.iter().map(|l| vec![0.0; l.len()]).collect(),
            rho: layers.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Epoch `e` uses `learning_rate / (1 + lr_decay * e)`.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight draws averaged per training step.
    pub mc_train: usize,
    pub prior_std: f64,
    /// Multiplies the `|batch| / |dataset|` KL weight.
    pub kl_scale: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub sigma_floor: f64,
    pub init_range: f64,
    pub init_rho: f64,
    pub optimizer: Optimizer,
    /// Fixed weight draws for an end-of-epoch full-data negative ELBO; 0 disables it.
    #[serde(default)]
    pub trace_draws: usize,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            learning_rate: 0.01,
            lr_decay: 0.05,
            epochs: 200,
            batch_size: 64,
            mc_train: 1,
            prior_std: 1.0,
            kl_scale: 1.0,
            patience: 20,
            validation_fraction: 0.1,
            sigma_floor: 1e-3,
            init_range: 0.05,
            init_rho: -3.0,
            optimizer: Optimizer::Adam,
            trace_draws: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(crate::error::invalid_config(m.to_string()));
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.lr_decay >= 0.0) {
            return bad("lr_decay must be >= 0");
        }
        if self.batch_size == 0 || self.mc_train == 0 {
            return bad("batch_size and mc_train must be positive");
        }
        if !(self.prior_std > 0.0) || !(self.sigma_floor > 0.0) {
            return bad("prior_std and sigma_floor must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if !(self.kl_scale >= 0.0) {
            return bad("kl_scale must be >= 0");
        }
        Ok(())
    }
}

/// Predictive moments in vehicle units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    /// Mean clamped at zero.
    pub mean: f64,
    /// Mean before clamping.
    pub raw_mean: f64,
    pub epistemic: f64,
    pub aleatoric: f64,
    pub samples: usize,
}

impl PredictiveDistribution {
    pub fn total_variance(&self) -> f64 {
        self.epistemic + self.aleatoric
    }

    pub fn std(&self) -> f64 {
        self.total_variance().sqrt()
    }
}

/// Activations recorded by a forward pass.
struct Tape {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    out: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaclModel {
    pub layers: Vec<VariationalLayer>,
    pub mode: Mode,
    pub feature_mode: FeatureMode,
    pub hyper: Hyperparameters,
    pub input_norm: Normalizer,
    pub target_norm: Normalizer,
    pub seed: u64,
    /// Trained on counts that exclude the vehicle at the span end.
    #[serde(default)]
    pub open_interval: bool,
}

impl BaclModel {
    /// Fresh model with identity normalization.
    pub fn new(input_width: usize, hyper: Hyperparameters, mode: Mode, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if input_width == 0 {
            return Err(invalid_arg("input width must be positive"));
        }
        let mut rng = rng_from(crate::seed::sub_seed(seed, "init"));
        let mut widths = vec![input_width];
        widths.extend(&hyper.hidden);
        widths.push(2);
        let layers = widths
            .windows(2)
            .map(|w| VariationalLayer::new(w[0], w[1], hyper.init_range, hyper.init_rho, &mut rng))
            .collect();
        Ok(Self {
            layers,
            mode,
            feature_mode: FeatureMode::default(),
            hyper,
            input_norm: Normalizer::identity(input_width),
            target_norm: Normalizer::identity(1),
            seed,
            open_interval: false,
        })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| 2 * l.len()).sum()
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Noise {
        self.layers
            .iter()
            .map(|l| (0..l.len()).map(|_| StandardNormal.sample(rng)).collect())
            .collect()
    }

    pub fn zero_noise(&self) -> Noise {
        self.layers.iter().map(|l| vec![0.0; l.len()]).collect()
    }

    /// Concrete weights for `eps`; deterministic mode ignores `eps`.
    pub fn sample_weights(&self, eps: &Noise) -> Vec<Vec<f64>> {
        match self.mode {
            Mode::Deterministic => self.layers.iter().map(|l| l.mu.clone()).collect(),
            Mode::Bayesian => self.layers.iter().zip(eps).map(|(l, e)| l.sample(e)).collect(),
        }
    }

    pub fn kl(&self) -> f64 {
        self.layers.iter().map(|l| l.kl(self.hyper.prior_std)).sum()
    }

    fn forward(&self, w: &[Vec<f64>], x: &[f64]) -> Tape {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        let mut out = [0.0; 2];
        for (k, (layer, wk)) in self.layers.iter().zip(w).enumerate() {
            let s = layer.stride();
            let mut z = Vec::with_capacity(layer.n_out);
            for o in 0..layer.n_out {
                let row = &wk[o * s..(o + 1) * s];
                let mut acc = row[layer.n_in];
                for (wi, hi) in row[..layer.n_in].iter().zip(&h) {
                    acc += wi * hi;
                }
                z.push(acc);
            }
            inputs.push(h);
            if k == last {
                out = [z[0], z[1]];
                h = Vec::new();
            } else {
                h = z.into_iter().map(f64::tanh).collect();
            }
        }
        Tape { inputs, out }
    }

    fn heads(&self, out: [f64; 2]) -> (f64, f64) {
        (out[0], softplus(out[1]) + self.hyper.sigma_floor)
    }

    /// Mean and aleatoric std in normalized target units.
    pub fn forward_normalized(&self, w: &[Vec<f64>], x: &[f64]) -> (f64, f64) {
        self.heads(self.forward(w, x).out)
    }

    /// Accumulates `d loss / d w` for one sample into `gw`; returns the NLL.
    fn backprop_sample(&self, w: &[Vec<f64>], x: &[f64], y: f64, gw: &mut [Vec<f64>]) -> f64 {
        let tape = self.forward(w, x);
        let (m, sigma) = self.heads(tape.out);
        let r = y - m;
        let nll = 0.5 * (2.0 * std::f64::consts::PI).ln() + sigma.ln() + r * r / (2.0 * sigma * sigma);
        let d_m = -r / (sigma * sigma);
        let d_sigma = 1.0 / sigma - r * r / (sigma * sigma * sigma);
        let mut delta = vec![d_m, d_sigma * sigmoid(tape.out[1])];
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let s = layer.stride();
            let input = &tape.inputs[k];
            let mut d_in = vec![0.0; layer.n_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &w[k][o * s..(o + 1) * s];
                let grow = &mut gw[k][o * s..(o + 1) * s];
                for i in 0..layer.n_in {
                    grow[i] += d * input[i];
                    d_in[i] += row[i] * d;
                }
                grow[layer.n_in] += d;
            }
            if k > 0 {
                delta = d_in.iter().zip(input).map(|(d, h)| d * (1.0 - h * h)).collect();
            }
        }
        nll
    }

    /// Negative ELBO and its gradient on normalized `(x, y)` pairs.
    ///
    /// The NLL is summed over the batch and averaged over `noises`; the KL is
    /// multiplied by `kl_weight`. Deterministic mode uses the posterior mean
    /// and omits the KL.
    pub fn loss_and_gradients(&self, batch: &[(Vec<f64>, f64)], noises: &[Noise], kl_weight: f64) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(invalid_arg("empty minibatch"));
        }
        let zero = [self.zero_noise()];
        let noises: &[Noise] = match self.mode {
            Mode::Deterministic => &zero,
            Mode::Bayesian if noises.is_empty() => return Err(invalid_arg("no noise draws supplied")),
            Mode::Bayesian => noises,
        };
        let mut g = Gradients::zeros(&self.layers);
        let mut nll = 0.0;
        let inv = 1.0 / noises.len() as f64;
        for eps in noises {
            let w = self.sample_weights(eps);
            let mut gw: Vec<Vec<f64>> = self.layers.iter().map(|l| vec![0.0; l.len()]).collect();
            for (x, y) in batch {
                nll += self.backprop_sample(&w, x, *y, &mut gw);
            }
            for (k, layer) in self.layers.iter().enumerate() {
                for j in 0..layer.len() {
                    g.mu[k][j] += gw[k][j] * inv;
                    if self.mode == Mode::Bayesian {
                        g.rho[k][j] += gw[k][j] * eps[k][j] * sigmoid(layer.rho[j]) * inv;
                    }
                }
            }
        }
        let mut loss = nll * inv;
        if self.mode == Mode::Bayesian && kl_weight != 0.0 {
            let p2 = self.hyper.prior_std * self.hyper.prior_std;
            loss += kl_weight * self.kl();
            for (k, layer) in self.layers.iter().enumerate() {
                for j in 0..layer.len() {
                    let s = softplus(layer.rho[j]);
                    g.mu[k][j] += kl_weight * layer.mu[j] / p2;
                    g.rho[k][j] += kl_weight * (-1.0 / s + s / p2) * sigmoid(layer.rho[j]);
                }
            }
        }
        Ok((loss, g))
    }

    pub fn negative_elbo(&self, batch: &[(Vec<f64>, f64)], noises: &[Noise], kl_weight: f64) -> Result<f64> {
        Ok(self.loss_and_gradients(batch, noises, kl_weight)?.0)
    }

    /// One plain gradient-descent update. Returns the pre-update loss.
    pub fn gradient_step(&mut self, batch: &[(Vec<f64>, f64)], noises: &[Noise], kl_weight: f64, lr: f64) -> Result<f64> {
        let (loss, g) = self.loss_and_gradients(batch, noises, kl_weight)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for j in 0..layer.mu.len() {
                layer.mu[j] -= lr * g.mu[k][j];
                layer.rho[j] -= lr * g.rho[k][j];
            }
        }
        Ok(loss)
    }

    fn to_vehicles(&self, m: f64, var_m: f64, var_a: f64) -> (f64, f64, f64) {
        let k = self.target_norm.scale[0];
        (m * k + self.target_norm.shift[0], var_m * k * k, var_a * k * k)
    }

    /// Predictive moments for raw feature rows using `samples` weight draws
    /// from `rng`. Each draw is shared across all rows.
    pub fn predict_with<R: Rng + ?Sized>(&self, xs: &[Vec<f64>], samples: usize, rng: &mut R) -> Vec<PredictiveDistribution> {
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| self.input_norm.apply(x)).collect();
        let draws = match self.mode {
            Mode::Deterministic => 1,
            Mode::Bayesian => samples.max(1),
        };
        let mut s1 = vec![0.0; zs.len()];
        let mut s2 = vec![0.0; zs.len()];
        let mut sa = vec![0.0; zs.len()];
        for _ in 0..draws {
            let w = match self.mode {
                Mode::Deterministic => self.sample_weights(&Vec::new()),
                Mode::Bayesian => self.sample_weights(&self.draw_noise(rng)),
            };
            for (i, z) in zs.iter().enumerate() {
                let (m, s) = self.forward_normalized(&w, z);
                s1[i] += m;
                s2[i] += m * m;
                sa[i] += s * s;
            }
        }
        let n = draws as f64;
        (0..zs.len())
            .map(|i| {
                let mean = s1[i] / n;
                let epi = if draws == 1 { 0.0 } else { (s2[i] / n - mean * mean).max(0.0) };
                let (raw_mean, epistemic, aleatoric) = self.to_vehicles(mean, epi, sa[i] / n);
                PredictiveDistribution {
                    mean: raw_mean.max(0.0),
                    raw_mean,
                    epistemic,
                    aleatoric,
                    samples: draws,
                }
            })
            .collect()
    }

    pub fn predict(&self, xs: &[Vec<f64>], samples: usize, seed: u64) -> Vec<PredictiveDistribution> {
        self.predict_with(xs, samples, &mut rng_from(seed))
    }

    /// Posterior-mean prediction (`eps = 0`) in vehicle units.
    pub fn predict_at_mean(&self, x: &[f64]) -> (f64, f64) {
        let w: Vec<Vec<f64>> = self.layers.iter().map(|l| l.mu.clone()).collect();
        let (m, s) = self.forward_normalized(&w, &self.input_norm.apply(x));
        let (m, _, a) = self.to_vehicles(m, 0.0, s * s);
        (m, a.sqrt())
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ModelMismatch(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.mu.len() != l.n_out * (l.n_in + 1) || l.rho.len() != l.mu.len() {
                return bad(format!("layer {k} parameter count does not match {}x{}", l.n_out, l.n_in));
            }
            if k > 0 && self.layers[k - 1].n_out != l.n_in {
                return bad(format!("layer {k} input width {} != previous output {}", l.n_in, self.layers[k - 1].n_out));
            }
        }
        if self.layers.last().map(|l| l.n_out) != Some(2) {
            return bad("output layer must have 2 units".into());
        }
        let w = self.input_width();
        if self.input_norm.width() != w || self.input_norm.scale.len() != w {
            return bad(format!("normalizer width {} != input width {w}", self.input_norm.width()));
        }
        if self.target_norm.width() != 1 || self.target_norm.scale.len() != 1 {
            return bad("target normalizer must have width 1".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            format: &'a str,
            version: u32,
            model: &'a BaclModel,
        }
        Ok(serde_json::to_string_pretty(&Out {
            format: ARTIFACT_FORMAT,
            version: ARTIFACT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct In {
            format: String,
            version: u32,
            model: serde_json::Value,
        }
        let art: In = serde_json::from_str(text)?;
        if art.format != ARTIFACT_FORMAT {
            return Err(Error::ModelMismatch(format!("unknown format {:?}", art.format)));
        }
        if art.version != ARTIFACT_VERSION {
            return Err(Error::ModelMismatch(format!(
                "artifact version {} is not supported (expected {ARTIFACT_VERSION})",
                art.version
            )));
        }
        let model: BaclModel = serde_json::from_value(art.model)?;
        model.check_shapes()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Loads an artifact, optionally requiring a specific input width.
    pub fn load(path: &Path, expected_input: Option<usize>) -> Result<Self> {
        let model = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(w) = expected_input {
            if model.input_width() != w {
                return Err(Error::ModelMismatch(format!(
                    "model expects {} inputs, data provides {w}",
                    model.input_width()
                )));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests;
