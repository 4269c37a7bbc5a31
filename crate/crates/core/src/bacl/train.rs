use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BaclModel, Gradients, Mode, VariationalLayer};
use crate::error::{invalid_arg, Error, Result};
use crate::features::Normalizer;
use crate::seed::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Summed minibatch negative ELBO over the epoch.
    pub train_loss: f64,
    /// Mean validation NLL at the posterior mean, normalized units.
    pub val_nll: f64,
    /// Full-data negative ELBO over `trace_draws` fixed weight draws.
    #[serde(default)]
    pub elbo_trace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub n_train: usize,
    pub n_val: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, layers: &mut [VariationalLayer], g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let mut idx = 0;
        for (k, layer) in layers.iter_mut().enumerate() {
            for (params, grads) in [(&mut layer.mu, &g.mu[k]), (&mut layer.rho, &g.rho[k])] {
                for (p, gr) in params.iter_mut().zip(grads) {
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    *m = Self::B1 * *m + (1.0 - Self::B1) * gr;
                    *v = Self::B2 * *v + (1.0 - Self::B2) * gr * gr;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                    idx += 1;
                }
            }
        }
    }
}

impl BaclModel {
    fn nll_at_mean(&self, data: &[(Vec<f64>, f64)]) -> f64 {
        let w: Vec<Vec<f64>> = self.layers.iter().map(|l| l.mu.clone()).collect();
        let total: f64 = data
            .iter()
            .map(|(x, y)| {
                let (m, s) = self.forward_normalized(&w, x);
                0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln() + (y - m).powi(2) / (2.0 * s * s)
            })
            .sum();
        total / data.len().max(1) as f64
    }

    /// Fits normalization on `(xs, ys)` and trains by minibatch descent on the
    /// negative ELBO. The parameters with the best validation NLL are kept.
    pub fn train(&mut self, xs: &[Vec<f64>], ys: &[f64], seed: u64) -> Result<TrainReport> {
        if xs.is_empty() {
            return Err(invalid_arg("training needs at least one sample"));
        }
        if xs.len() != ys.len() {
            return Err(invalid_arg("feature and target counts differ"));
        }
        if xs.iter().any(|x| x.len() != self.input_width()) {
            return Err(invalid_arg(format!("feature rows must have width {}", self.input_width())));
        }
        let h = self.hyper.clone();
        self.input_norm = Normalizer::fit(xs)?;
        self.target_norm = Normalizer::fit(&ys.iter().map(|y| vec![*y]).collect::<Vec<_>>())?;
        let data: Vec<(Vec<f64>, f64)> = xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (self.input_norm.apply(x), self.target_norm.apply(&[*y])[0]))
            .collect();

        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(seed, "split"));
        let n_val = if data.len() >= 10 {
            (h.validation_fraction * data.len() as f64).floor() as usize
        } else {
            0
        };
        let val: Vec<(Vec<f64>, f64)> = order[..n_val].iter().map(|&i| data[i].clone()).collect();
        let mut train: Vec<(Vec<f64>, f64)> = order[n_val..].iter().map(|&i| data[i].clone()).collect();

        let mut rng = stream_rng(seed, "minibatch");
        let mut noise_rng = stream_rng(seed, "noise");
        let mut adam = Adam::new(self.parameter_count());
        let mut report = TrainReport {
            n_train: train.len(),
            n_val,
            ..Default::default()
        };
        let trace_noise: Vec<_> = match self.mode {
            Mode::Bayesian => {
                let mut r = stream_rng(seed, "trace");
                (0..h.trace_draws).map(|_| self.draw_noise(&mut r)).collect()
            }
            Mode::Deterministic => Vec::new(),
        };
        let mut best = (f64::INFINITY, self.layers.clone(), 0usize);
        let mut initial: Option<f64> = None;
        let mut over = 0;

        for epoch in 0..h.epochs {
            train.shuffle(&mut rng);
            let lr = h.learning_rate / (1.0 + h.lr_decay * epoch as f64);
            let mut epoch_loss = 0.0;
            for (b, batch) in train.chunks(h.batch_size).enumerate() {
                let noises: Vec<_> = match self.mode {
                    Mode::Bayesian => (0..h.mc_train).map(|_| self.draw_noise(&mut noise_rng)).collect(),
                    Mode::Deterministic => Vec::new(),
                };
                let kl_weight = h.kl_scale * batch.len() as f64 / train.len() as f64;
                let (loss, g) = self.loss_and_gradients(batch, &noises, kl_weight)?;
                if !loss.is_finite() || g.mu.iter().chain(&g.rho).flatten().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                epoch_loss += loss;
                match h.optimizer {
                    Optimizer::Adam => adam.step(&mut self.layers, &g, lr),
                    Optimizer::Sgd => {
                        for (k, layer) in self.layers.iter_mut().enumerate() {
                            for j in 0..layer.mu.len() {
                                layer.mu[j] -= lr * g.mu[k][j];
                                layer.rho[j] -= lr * g.rho[k][j];
                            }
                        }
                    }
                }
            }
            let init = *initial.get_or_insert(epoch_loss);
            if epoch_loss > 10.0 * init.abs() && epoch > 0 {
                over += 1;
                if over >= 5 {
                    return Err(Error::Diverged { epoch, loss: epoch_loss, initial: init });
                }
            } else {
                over = 0;
            }
            let val_nll = if val.is_empty() {
                epoch_loss / train.len() as f64
            } else {
                self.nll_at_mean(&val)
            };
            let elbo_trace = if h.trace_draws > 0 {
                Some(self.negative_elbo(&train, &trace_noise, h.kl_scale)?)
            } else {
                None
            };
            report.epochs.push(EpochStats { epoch, train_loss: epoch_loss, val_nll, elbo_trace });
            if val_nll < best.0 {
                best = (val_nll, self.layers.clone(), epoch);
            } else if epoch - best.2 > h.patience {
                report.stopped_early = true;
                log::debug!("early stop at epoch {epoch}, best {}", best.2);
                break;
            }
        }
        if best.0.is_finite() {
            self.layers = best.1;
            report.best_epoch = best.2;
        }
        Ok(report)
    }
}
