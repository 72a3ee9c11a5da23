//! Soft-gating mixture of experts over the early- and late-fusion
//! probability outputs. A shallow MLP maps the concatenated expert
//! probabilities [p_LF_f, p_LF_l, p_EF_f, p_EF_l] to two softmax weights
//! (w_LF, w_EF); the combined prediction is the per-hazard convex
//! combination of the experts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, relu, relu_deriv, softmax, Adam, Dense, Tensor};
use crate::rng::Rng;

const GATE_INPUT: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateNetwork {
    pub l1: Dense,
    pub l2: Dense,
    pub l3: Dense,
    pub dropout1: f64,
    pub dropout2: f64,
}

pub struct GateCache {
    z: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    mask1: Option<Vec<f64>>,
    mask2: Option<Vec<f64>>,
    pub weights: [f64; 2],
}

impl GateNetwork {
    pub fn init(rng: &mut Rng) -> Self {
        GateNetwork {
            l1: Dense::init(GATE_INPUT, 32, rng),
            l2: Dense::init(32, 16, rng),
            l3: Dense::init(16, 2, rng),
            dropout1: 0.20,
            dropout2: 0.10,
        }
    }

    fn forward_cached(&self, z: &[f64], mut rng: Option<&mut Rng>) -> Result<GateCache> {
        if z.len() != GATE_INPUT {
            return Err(Error::Dimension(format!(
                "gate input has {} entries, expected {GATE_INPUT}",
                z.len()
            )));
        }
        for v in z {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Validation(format!("gate input {v} outside [0,1]")));
            }
        }
        let a1 = self.l1.forward(z);
        let mut h1: Vec<f64> = a1.iter().map(|v| relu(*v)).collect();
        let mask1 = rng
            .as_deref_mut()
            .map(|r| dropout_mask(h1.len(), self.dropout1, r));
        if let Some(m) = &mask1 {
            h1.iter_mut().zip(m).for_each(|(h, mi)| *h *= mi);
        }
        let a2 = self.l2.forward(&h1);
        let mut h2: Vec<f64> = a2.iter().map(|v| relu(*v)).collect();
        let mask2 = rng.map(|r| dropout_mask(h2.len(), self.dropout2, r));
        if let Some(m) = &mask2 {
            h2.iter_mut().zip(m).for_each(|(h, mi)| *h *= mi);
        }
        let logits = self.l3.forward(&h2);
        let w = softmax(&logits);
        Ok(GateCache {
            z: z.to_vec(),
            a1,
            h1,
            a2,
            h2,
            mask1,
            mask2,
            weights: [w[0], w[1]],
        })
    }

    /// Backpropagate a gradient on the softmax weights.
    fn backward(&mut self, cache: &GateCache, dweights: [f64; 2]) {
        let w = cache.weights;
        let dot = dweights[0] * w[0] + dweights[1] * w[1];
        let dlogits = [w[0] * (dweights[0] - dot), w[1] * (dweights[1] - dot)];
        let mut dh2 = self.l3.backward(&cache.h2, &dlogits);
        if let Some(m) = &cache.mask2 {
            dh2.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
        }
        let da2: Vec<f64> = dh2
            .iter()
            .zip(&cache.a2)
            .map(|(d, a)| d * relu_deriv(*a))
            .collect();
        let mut dh1 = self.l2.backward(&cache.h1, &da2);
        if let Some(m) = &cache.mask1 {
            dh1.iter_mut().zip(m).for_each(|(d, mi)| *d *= mi);
        }
        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.a1)
            .map(|(d, a)| d * relu_deriv(*a))
            .collect();
        let _ = self.l1.backward(&cache.z, &da1);
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.extend(self.l1.tensors_mut());
        out.extend(self.l2.tensors_mut());
        out.extend(self.l3.tensors_mut());
        out
    }
}

/// Soft mixture weights (w_LF, w_EF) for one location.
pub fn gate_forward(gate: &GateNetwork, z: &[f64]) -> Result<(f64, f64)> {
    let cache = gate.forward_cached(z, None)?;
    Ok((cache.weights[0], cache.weights[1]))
}

/// Per-hazard convex combination of the two experts.
pub fn moe_combine(w: (f64, f64), p_lf: (f64, f64), p_ef: (f64, f64)) -> (f64, f64) {
    (w.0 * p_lf.0 + w.1 * p_ef.0, w.0 * p_lf.1 + w.1 * p_ef.1)
}

/// Expert outputs for one sample: LF pair then EF pair.
#[derive(Debug, Clone, Copy)]
pub struct ExpertOutputs {
    pub p_lf: (f64, f64),
    pub p_ef: (f64, f64),
}

impl ExpertOutputs {
    pub fn gate_input(&self) -> [f64; 4] {
        [self.p_lf.0, self.p_lf.1, self.p_ef.0, self.p_ef.1]
    }
}

fn smooth(y: u8, s: f64) -> f64 {
    y as f64 * (1.0 - s) + s / 2.0
}

const P_FLOOR: f64 = 1e-12;

fn bce(y_smooth: f64, p: f64) -> f64 {
    let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
    -(y_smooth * p.ln() + (1.0 - y_smooth) * (1.0 - p).ln())
}

fn gate_sample_loss_grad(
    gate: &GateNetwork,
    cache: &GateCache,
    e: &ExpertOutputs,
    labels: (u8, u8),
    smoothing: f64,
) -> (f64, [f64; 2]) {
    let _ = gate;
    let w = (cache.weights[0], cache.weights[1]);
    let p = moe_combine(w, e.p_lf, e.p_ef);
    let ys = (smooth(labels.0, smoothing), smooth(labels.1, smoothing));
    let loss = 0.5 * (bce(ys.0, p.0) + bce(ys.1, p.1));
    let dp = |y: f64, p: f64| {
        let p = p.clamp(P_FLOOR, 1.0 - P_FLOOR);
        0.5 * (p - y) / (p * (1.0 - p))
    };
    let d0 = dp(ys.0, p.0);
    let d1 = dp(ys.1, p.1);
    let dw_lf = d0 * e.p_lf.0 + d1 * e.p_lf.1;
    let dw_ef = d0 * e.p_ef.0 + d1 * e.p_ef.1;
    (loss, [dw_lf, dw_ef])
}

fn mean_gate_loss(
    gate: &GateNetwork,
    experts: &[ExpertOutputs],
    labels: &[(u8, u8)],
    smoothing: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (e, lab) in experts.iter().zip(labels) {
        let cache = gate.forward_cached(&e.gate_input(), None)?;
        let (loss, _) = gate_sample_loss_grad(gate, &cache, e, *lab, smoothing);
        total += loss;
    }
    Ok(total / experts.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateTrainLog {
    pub epochs: Vec<(usize, f64, f64)>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Train the gate on frozen expert outputs with smoothed binary
/// cross-entropy averaged over the two hazards.
pub fn moe_train(
    gate: &mut GateNetwork,
    train_experts: &[ExpertOutputs],
    train_labels: &[(u8, u8)],
    val_experts: &[ExpertOutputs],
    val_labels: &[(u8, u8)],
    cfg: &crate::config::GateTrainConfig,
    seed: u64,
) -> Result<GateTrainLog> {
    if train_experts.is_empty() || val_experts.is_empty() {
        return Err(Error::Validation(
            "gate training requires non-empty splits".into(),
        ));
    }
    if train_labels.iter().all(|l| *l == train_labels[0]) {
        return Err(Error::Validation(
            "gate training labels are constant".into(),
        ));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut rng = Rng::substream(seed, "moe_train");
    let mut order: Vec<usize> = (0..train_experts.len()).collect();
    let mut best_snapshot = gate.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut log = GateTrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
    };
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut train_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            for t in gate.tensors_mut() {
                t.zero_grad();
            }
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let e = &train_experts[i];
                let cache = gate.forward_cached(&e.gate_input(), Some(&mut rng))?;
                let (loss, dw) =
                    gate_sample_loss_grad(gate, &cache, e, train_labels[i], cfg.label_smoothing);
                train_sum += loss;
                gate.backward(&cache, [dw[0] * inv, dw[1] * inv]);
            }
            adam.begin_step();
            for t in gate.tensors_mut() {
                adam.update(t);
            }
        }
        let val_loss = mean_gate_loss(gate, val_experts, val_labels, cfg.label_smoothing)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "gate validation loss diverged at epoch {epoch}"
            )));
        }
        log.epochs
            .push((epoch, train_sum / train_experts.len() as f64, val_loss));
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_snapshot = gate.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    *gate = best_snapshot;
    log.best_epoch = best_epoch;
    log.best_val_loss = best_val;
    Ok(log)
}
