//! Fully connected feed-forward regressor trained with Adam on mean squared
//! error. Hidden layers share one activation; the output is a single linear
//! unit. Parameters live in one flat vector so the optimizer and the
//! finite-difference gradient check walk the same storage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activated value `a = apply(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MlpConfig {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub batch_size: usize,
    /// Relative validation-MSE improvement below which an epoch does not
    /// reset the patience counter.
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: vec![18, 14, 9, 10],
            activation: Activation::Relu,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 200,
            early_stop_patience: 10,
            validation_fraction: 0.1,
            batch_size: 64,
            min_improvement: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("training needs at least two rows (train plus validation)")]
    EmptyTrainingSet,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("row has {got} features, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network needs at least one hidden layer with positive widths")]
    BadTopology,
}

/// Offsets of one layer's weights and biases inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct LayerLayout {
    w_offset: usize,
    b_offset: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
    activation: Activation,
}

impl Mlp {
    /// Random He-uniform initialization for the given topology.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Mlp, MlpError> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(MlpError::BadTopology);
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(1);

        let mut layout = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layout.push(LayerLayout {
                w_offset: offset,
                b_offset: offset + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = vec![0.0; offset];
        for l in &layout {
            let bound = (6.0 / l.fan_in as f64).sqrt();
            for w in &mut params[l.w_offset..l.w_offset + l.fan_in * l.fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Mlp {
            widths,
            layout,
            params,
            activation,
        })
    }

    /// All-zero parameters; forward output is identically zero.
    pub fn zeroed(
        input_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Result<Mlp, MlpError> {
        let mut net = Mlp::new(input_dim, hidden, activation, 0)?;
        net.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Single forward pass.
    pub fn forward(&self, row: &[f64]) -> Result<f64, MlpError> {
        if row.len() != self.widths[0] {
            return Err(MlpError::DimensionMismatch {
                expected: self.widths[0],
                got: row.len(),
            });
        }
        let mut acts = row.to_vec();
        for (i, l) in self.layout.iter().enumerate() {
            let last = i + 1 == self.layout.len();
            let mut next = Vec::with_capacity(l.fan_out);
            for o in 0..l.fan_out {
                let w = &self.params[l.w_offset + o * l.fan_in..l.w_offset + (o + 1) * l.fan_in];
                let z: f64 = w.iter().zip(&acts).map(|(w, a)| w * a).sum::<f64>()
                    + self.params[l.b_offset + o];
                next.push(if last { z } else { self.activation.apply(z) });
            }
            acts = next;
        }
        Ok(acts[0])
    }

    /// Mean squared error and its gradient w.r.t. every parameter, over the
    /// given rows. The flat gradient matches `params()` index for index.
    /// Activation and delta buffers are allocated once per call and reused
    /// across samples.
    pub fn loss_and_gradient(&self, x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
        let d = self.widths[0];
        let n = y.len();
        debug_assert_eq!(x.len(), n * d);
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;

        let mut acts: Vec<Vec<f64>> = self.widths.iter().map(|&w| vec![0.0; w]).collect();
        let mut deltas: Vec<Vec<f64>> = self.widths.iter().map(|&w| vec![0.0; w]).collect();

        for s in 0..n {
            acts[0].copy_from_slice(&x[s * d..(s + 1) * d]);
            for (i, l) in self.layout.iter().enumerate() {
                let last = i + 1 == self.layout.len();
                let (before, after) = acts.split_at_mut(i + 1);
                let prev = &before[i];
                let next = &mut after[0];
                for o in 0..l.fan_out {
                    let w =
                        &self.params[l.w_offset + o * l.fan_in..l.w_offset + (o + 1) * l.fan_in];
                    let z: f64 = w.iter().zip(prev.iter()).map(|(w, a)| w * a).sum::<f64>()
                        + self.params[l.b_offset + o];
                    next[o] = if last { z } else { self.activation.apply(z) };
                }
            }

            let pred = acts[self.layout.len()][0];
            let err = pred - y[s];
            loss += err * err;

            // dL/d(pred) for the mean-over-samples squared error.
            deltas[self.layout.len()][0] = 2.0 * err / n as f64;
            for (i, l) in self.layout.iter().enumerate().rev() {
                let prev = &acts[i];
                let (down, up) = deltas.split_at_mut(i + 1);
                let delta = &up[0];
                let prev_delta = &mut down[i];
                prev_delta.iter_mut().for_each(|p| *p = 0.0);
                for o in 0..l.fan_out {
                    let dz = delta[o];
                    grad[l.b_offset + o] += dz;
                    let w_row = l.w_offset + o * l.fan_in..l.w_offset + (o + 1) * l.fan_in;
                    for (j, (g, w)) in grad[w_row.clone()]
                        .iter_mut()
                        .zip(&self.params[w_row])
                        .enumerate()
                    {
                        *g += dz * prev[j];
                        prev_delta[j] += dz * w;
                    }
                }
                if i > 0 {
                    for (pd, a) in prev_delta.iter_mut().zip(prev.iter()) {
                        *pd *= self.activation.derivative_from_output(*a);
                    }
                }
            }
        }
        (loss / n as f64, grad)
    }

    /// Mean squared error over rows, no gradient.
    pub fn mse(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.widths[0];
        let mut loss = 0.0;
        for (s, &target) in y.iter().enumerate() {
            let pred = self.forward(&x[s * d..(s + 1) * d]).expect("width checked");
            loss += (pred - target) * (pred - target);
        }
        loss / y.len() as f64
    }

    /// Smallest |pre-activation| over all hidden units and rows. Used by the
    /// gradient check to stay away from the ReLU kink, where central
    /// differences are not meaningful.
    pub fn min_preactivation_margin(&self, x: &[f64]) -> f64 {
        let d = self.widths[0];
        let n = x.len() / d;
        let mut margin = f64::INFINITY;
        for s in 0..n {
            let mut acts = x[s * d..(s + 1) * d].to_vec();
            for (i, l) in self.layout.iter().enumerate() {
                let last = i + 1 == self.layout.len();
                let mut next = Vec::with_capacity(l.fan_out);
                for o in 0..l.fan_out {
                    let w =
                        &self.params[l.w_offset + o * l.fan_in..l.w_offset + (o + 1) * l.fan_in];
                    let z: f64 = w.iter().zip(&acts).map(|(w, a)| w * a).sum::<f64>()
                        + self.params[l.b_offset + o];
                    if !last {
                        margin = margin.min(z.abs());
                    }
                    next.push(if last { z } else { self.activation.apply(z) });
                }
                acts = next;
            }
        }
        margin
    }

    /// Trains with minibatch Adam and early stopping on a held-out validation
    /// split. Restores the best validation parameters before returning.
    pub fn fit(x: &[f64], width: usize, y: &[f64], cfg: &MlpConfig) -> Result<Mlp, MlpError> {
        if y.len() < 2 || x.len() != y.len() * width {
            return Err(MlpError::EmptyTrainingSet);
        }
        let mut net = Mlp::new(width, &cfg.hidden_layers, cfg.activation, cfg.seed)?;
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5DEE_CE66_D1CE_5EED);

        let n = y.len();
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let val_n = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
        let (val_idx, train_idx) = indices.split_at(val_n);

        let gather = |idx: &[usize]| -> (Vec<f64>, Vec<f64>) {
            let mut gx = Vec::with_capacity(idx.len() * width);
            let mut gy = Vec::with_capacity(idx.len());
            for &i in idx {
                gx.extend_from_slice(&x[i * width..(i + 1) * width]);
                gy.push(y[i]);
            }
            (gx, gy)
        };
        let (val_x, val_y) = gather(val_idx);
        let mut train_order: Vec<usize> = train_idx.to_vec();

        let mut adam_m = vec![0.0; net.params.len()];
        let mut adam_v = vec![0.0; net.params.len()];
        let mut step = 0usize;

        let mut best_params = net.params.clone();
        let mut best_val = net.mse(&val_x, &val_y);
        let mut stale_epochs = 0usize;
        let batch = cfg.batch_size.max(1);

        for epoch in 0..cfg.max_epochs {
            train_order.shuffle(&mut rng);
            for chunk in train_order.chunks(batch) {
                let (bx, by) = gather(chunk);
                let (loss, grad) = net.loss_and_gradient(&bx, &by);
                if !loss.is_finite() {
                    return Err(MlpError::NonFiniteLoss { epoch });
                }
                step += 1;
                let bias1 = 1.0 - cfg.beta1.powi(step as i32);
                let bias2 = 1.0 - cfg.beta2.powi(step as i32);
                for (i, g) in grad.iter().enumerate() {
                    adam_m[i] = cfg.beta1 * adam_m[i] + (1.0 - cfg.beta1) * g;
                    adam_v[i] = cfg.beta2 * adam_v[i] + (1.0 - cfg.beta2) * g * g;
                    let m_hat = adam_m[i] / bias1;
                    let v_hat = adam_v[i] / bias2;
                    net.params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }

            let val = net.mse(&val_x, &val_y);
            if !val.is_finite() {
                return Err(MlpError::NonFiniteLoss { epoch });
            }
            if val < best_val {
                let meaningful = val < best_val * (1.0 - cfg.min_improvement);
                best_val = val;
                best_params.copy_from_slice(&net.params);
                if meaningful {
                    stale_epochs = 0;
                    continue;
                }
            }
            stale_epochs += 1;
            if stale_epochs >= cfg.early_stop_patience {
                break;
            }
        }

        net.params = best_params;
        Ok(net)
    }
}

/// Central-difference gradient check: returns the maximum relative error
/// between analytic and numeric derivatives over all parameters.
pub fn gradient_check(net: &Mlp, x: &[f64], y: &[f64], h: f64) -> f64 {
    let (_, analytic) = net.loss_and_gradient(x, y);
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    for i in 0..analytic.len() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let (up, _) = probe.loss_and_gradient(x, y);
        probe.params_mut()[i] = orig - h;
        let (down, _) = probe.loss_and_gradient(x, y);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
