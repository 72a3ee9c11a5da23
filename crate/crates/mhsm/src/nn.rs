//! Minimal dense-network building blocks shared by the early-fusion network
//! and the gating network: parameter tensors with Adam state, dense layers,
//! layer normalization, and activations, all in 64-bit with explicit
//! backward passes.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// A parameter vector with its gradient accumulator and Adam moments.
/// Serialization keeps only the values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Tensor {
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    m: Vec<f64>,
    s: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize) -> Self {
        Tensor {
            v: vec![0.0; n],
            g: vec![0.0; n],
            m: vec![0.0; n],
            s: vec![0.0; n],
        }
    }

    pub fn filled(n: usize, value: f64) -> Self {
        let mut t = Tensor::zeros(n);
        t.v.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.g.iter_mut().for_each(|x| *x = 0.0);
    }
}

impl From<Vec<f64>> for Tensor {
    fn from(v: Vec<f64>) -> Self {
        let n = v.len();
        Tensor {
            v,
            g: vec![0.0; n],
            m: vec![0.0; n],
            s: vec![0.0; n],
        }
    }
}

impl From<Tensor> for Vec<f64> {
    fn from(t: Tensor) -> Self {
        t.v
    }
}

/// Adam optimizer state shared across the parameter tensors of one model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&self, tensor: &mut Tensor) {
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..tensor.v.len() {
            let g = tensor.g[i];
            tensor.m[i] = self.beta1 * tensor.m[i] + (1.0 - self.beta1) * g;
            tensor.s[i] = self.beta2 * tensor.s[i] + (1.0 - self.beta2) * g * g;
            let mhat = tensor.m[i] / bc1;
            let shat = tensor.s[i] / bc2;
            tensor.v[i] -= self.lr * mhat / (shat.sqrt() + self.eps);
        }
    }
}

/// Fully connected layer, weights row-major (out x in).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    /// Fan-in-scaled uniform init, biases at zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let mut w = Tensor::zeros(in_dim * out_dim);
        for x in w.v.iter_mut() {
            *x = rng.range(-bound, bound);
        }
        Dense {
            in_dim,
            out_dim,
            w,
            b: Tensor::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = self.b.v.clone();
        for o in 0..self.out_dim {
            let row = &self.w.v[o * self.in_dim..(o + 1) * self.in_dim];
            out[o] += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        out
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, x: &[f64], dout: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let d = dout[o];
            self.b.g[o] += d;
            let row_w = &self.w.v[o * self.in_dim..(o + 1) * self.in_dim];
            let row_g = &mut self.w.g[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                row_g[i] += d * x[i];
                dx[i] += d * row_w[i];
            }
        }
        dx
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Layer normalization with learned gain and bias, eps = 1e-5, applied
/// pre-activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

/// Forward cache needed by the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(dim, 1.0),
            bias: Tensor::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, LnCache) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + self.eps).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
        let out = xhat
            .iter()
            .zip(&self.gain.v)
            .zip(&self.bias.v)
            .map(|((xh, g), b)| xh * g + b)
            .collect();
        (out, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache, dout: &[f64]) -> Vec<f64> {
        let n = dout.len() as f64;
        let mut dxhat = vec![0.0; dout.len()];
        for i in 0..dout.len() {
            self.gain.g[i] += dout[i] * cache.xhat[i];
            self.bias.g[i] += dout[i];
            dxhat[i] = dout[i] * self.gain.v[i];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
        let mean_dxhat_xhat = dxhat
            .iter()
            .zip(&cache.xhat)
            .map(|(d, xh)| d * xh)
            .sum::<f64>()
            / n;
        (0..dout.len())
            .map(|i| cache.inv_std * (dxhat[i] - mean_dxhat - cache.xhat[i] * mean_dxhat_xhat))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU in the tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Inverted-dropout mask: entries are 0 (dropped) or 1/keep.
pub fn dropout_mask(dim: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..dim)
        .map(|_| {
            if rng.uniform() < rate {
                0.0
            } else {
                1.0 / keep
            }
        })
        .collect()
}

/// Per-feature standardization fitted on training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, |r| r.len());
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x {
            for j in 0..d {
                let dlt = row[j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(1e-9)).collect();
        FeatureScaler { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let mut layer = Dense::init(4, 3, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let dout = vec![1.0, -0.5, 2.0];
        // analytic
        let dx = layer.backward(&x, &dout);
        let loss = |layer: &Dense, x: &[f64]| -> f64 {
            layer.forward(x).iter().zip(&dout).map(|(o, d)| o * d).sum()
        };
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-6);
        }
        for k in 0..layer.w.len() {
            let orig = layer.w.v[k];
            layer.w.v[k] = orig + h;
            let up = loss(&layer, &x);
            layer.w.v[k] = orig - h;
            let dn = loss(&layer, &x);
            layer.w.v[k] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((layer.w.g[k] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let mut ln = LayerNorm::new(5);
        for g in ln.gain.v.iter_mut() {
            *g = 1.0 + 0.3 * rng.normal();
        }
        let x: Vec<f64> = (0..5).map(|_| rng.normal() * 2.0).collect();
        let dout: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &dout);
        let loss = |ln: &LayerNorm, x: &[f64]| -> f64 {
            ln.forward(x).0.iter().zip(&dout).map(|(o, d)| o * d).sum()
        };
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&ln, &xp) - loss(&ln, &xm)) / (2.0 * h);
            assert!((dx[i] - fd).abs() < 1e-5, "dx[{i}] {} vs {}", dx[i], fd);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.4, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let w = softmax(&[3.0f64.ln(), 0.0]);
        assert!((w[0] - 0.75).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut t = Tensor::filled(3, 5.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            t.zero_grad();
            for i in 0..3 {
                t.g[i] = 2.0 * t.v[i];
            }
            adam.begin_step();
            adam.update(&mut t);
        }
        assert!(t.v.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn scaler_standardizes() {
        let x = vec![vec![10.0, -5.0], vec![20.0, 5.0], vec![30.0, 0.0]];
        let sc = FeatureScaler::fit(&x);
        let applied: Vec<Vec<f64>> = x.iter().map(|r| sc.apply(r)).collect();
        let mean0: f64 = applied.iter().map(|r| r[0]).sum::<f64>() / 3.0;
        assert!(mean0.abs() < 1e-12);
    }
}
