//! Early-fusion expert: an MLP that outputs the parameters of a bivariate
//! Gaussian over the two hazard labels (two means plus a Cholesky factor of
//! the covariance) and is trained with the Gaussian negative log-likelihood
//!
//!   (D/2) log(2 pi) + sum_i log l_ii + ||L^-1 (y - mu)||^2 / 2.
//!
//! The diagonal of L is predicted in log space and exponentiated (clamped to
//! +-8) so the covariance stays positive definite by construction. At
//! inference the means pass through a sigmoid and per-hazard beta
//! calibrators to become probabilities; the covariance yields the
//! log-determinant uncertainty and the inter-hazard correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout_mask, gelu, gelu_deriv, Adam, Dense, FeatureScaler, LayerNorm, Tensor};
use crate::rng::Rng;

pub const LOG_DIAG_CLAMP: f64 = 8.0;
const TWO_PI_LN: f64 = 1.837_877_066_409_345_5;

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Lower-triangular Cholesky factor and derived covariance quantities for
/// the two-hazard case.
#[derive(Debug, Clone, Copy)]
pub struct Cholesky2 {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

impl Cholesky2 {
    /// Sigma = L L^T expanded for the 2x2 case.
    pub fn sigma(&self) -> [[f64; 2]; 2] {
        [
            [self.l11 * self.l11, self.l11 * self.l21],
            [
                self.l11 * self.l21,
                self.l21 * self.l21 + self.l22 * self.l22,
            ],
        ]
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (self.l11.ln() + self.l22.ln())
    }

    pub fn rho(&self) -> f64 {
        let s = self.sigma();
        s[0][1] / (s[0][0].sqrt() * s[1][1].sqrt())
    }
}

/// Build L from the raw head tail (a, l21, b): diagonal entries are
/// exp(clamp(. , -8, 8)).
pub fn assemble_cholesky(a: f64, l21: f64, b: f64) -> Cholesky2 {
    Cholesky2 {
        l11: a.clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP).exp(),
        l21,
        l22: b.clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP).exp(),
    }
}

/// Gaussian negative log-likelihood of a label pair under (mu, L), via
/// forward substitution for L^-1 (y - mu).
pub fn mvg_nll(mu: [f64; 2], l: &Cholesky2, y: [f64; 2]) -> Result<f64> {
    let z1 = (y[0] - mu[0]) / l.l11;
    let z2 = ((y[1] - mu[1]) - l.l21 * z1) / l.l22;
    let loss = TWO_PI_LN + l.l11.ln() + l.l22.ln() + 0.5 * (z1 * z1 + z2 * z2);
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!(
            "non-finite NLL for mu={mu:?}, y={y:?}"
        )))
    }
}

/// Loss and gradient with respect to the raw 5-vector
/// (mu1, mu2, a, l21, b).
pub fn mvg_nll_grad(raw: &[f64; 5], y: [f64; 2]) -> (f64, [f64; 5]) {
    let (mu1, mu2, a, l21, b) = (raw[0], raw[1], raw[2], raw[3], raw[4]);
    let ind_a = if a.abs() < LOG_DIAG_CLAMP { 1.0 } else { 0.0 };
    let ind_b = if b.abs() < LOG_DIAG_CLAMP { 1.0 } else { 0.0 };
    let chol = assemble_cholesky(a, l21, b);
    let (l11, l22) = (chol.l11, chol.l22);
    let z1 = (y[0] - mu1) / l11;
    let z2 = ((y[1] - mu2) - l21 * z1) / l22;
    let loss = TWO_PI_LN
        + a.clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP)
        + b.clamp(-LOG_DIAG_CLAMP, LOG_DIAG_CLAMP)
        + 0.5 * (z1 * z1 + z2 * z2);
    let grad = [
        -z1 / l11 + z2 * l21 / (l11 * l22),
        -z2 / l22,
        ind_a * (1.0 - z1 * z1 + z2 * z1 * l21 / l22),
        -z2 * z1 / l22,
        ind_b * (1.0 - z2 * z2),
    ];
    (loss, grad)
}

/// One hidden block: dense, layer norm, GELU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub dense: Dense,
    pub norm: LayerNorm,
}

/// The MVG network. The first hidden block carries a residual connection:
/// the (scaled) input is linearly projected to the block width and added
/// after the activation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvgNet {
    pub input_dim: usize,
    pub blocks: Vec<Block>,
    pub proj: Dense,
    pub out: Dense,
    pub gaussian_noise_std: f64,
    pub dropout: f64,
}

/// Per-sample forward cache for backpropagation.
pub struct ForwardCache {
    input: Vec<f64>,
    pre_norm: Vec<Vec<f64>>,
    ln: Vec<crate::nn::LnCache>,
    normed: Vec<Vec<f64>>,
    block_out: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    pub raw: Vec<f64>,
}

impl MvgNet {
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        cfg_noise: f64,
        cfg_dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(!hidden.is_empty());
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            blocks.push(Block {
                dense: Dense::init(prev, h, rng),
                norm: LayerNorm::new(h),
            });
            prev = h;
        }
        MvgNet {
            input_dim,
            proj: Dense::init(input_dim, hidden[0], rng),
            out: Dense::init(prev, 5, rng),
            blocks,
            gaussian_noise_std: cfg_noise,
            dropout: cfg_dropout,
        }
    }

    /// Forward pass. Gaussian input noise and dropout apply only when an
    /// RNG is supplied (training mode); inference is deterministic.
    pub fn forward(&self, x: &[f64], train_rng: Option<&mut Rng>) -> Result<ForwardCache> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut rng = train_rng;
        let mut input = x.to_vec();
        if let Some(r) = rng.as_deref_mut() {
            if self.gaussian_noise_std > 0.0 {
                for v in input.iter_mut() {
                    *v += self.gaussian_noise_std * r.normal();
                }
            }
        }
        let n_blocks = self.blocks.len();
        let mut cache = ForwardCache {
            input: input.clone(),
            pre_norm: Vec::with_capacity(n_blocks),
            ln: Vec::with_capacity(n_blocks),
            normed: Vec::with_capacity(n_blocks),
            block_out: Vec::with_capacity(n_blocks),
            masks: Vec::with_capacity(n_blocks),
            raw: Vec::new(),
        };
        let mut h = input;
        for (k, block) in self.blocks.iter().enumerate() {
            let a = block.dense.forward(&h);
            let (n, ln_cache) = block.norm.forward(&a);
            let mut g: Vec<f64> = n.iter().map(|v| gelu(*v)).collect();
            if k == 0 {
                let p = self.proj.forward(&cache.input);
                for (gi, pi) in g.iter_mut().zip(&p) {
                    *gi += pi;
                }
            }
            let mask = rng
                .as_deref_mut()
                .and_then(|r| (self.dropout > 0.0).then(|| dropout_mask(g.len(), self.dropout, r)));
            if let Some(m) = &mask {
                for (gi, mi) in g.iter_mut().zip(m) {
                    *gi *= mi;
                }
            }
            cache.pre_norm.push(a);
            cache.ln.push(ln_cache);
            cache.normed.push(n);
            cache.block_out.push(g.clone());
            cache.masks.push(mask);
            h = g;
        }
        cache.raw = self.out.forward(&h);
        Ok(cache)
    }

    /// Backpropagate a gradient on the raw 5-vector, accumulating parameter
    /// gradients.
    pub fn backward(&mut self, cache: &ForwardCache, draw: &[f64]) {
        let last = self.blocks.len() - 1;
        let mut dh = self.out.backward(&cache.block_out[last], draw);
        for k in (0..self.blocks.len()).rev() {
            if let Some(mask) = &cache.masks[k] {
                for (d, m) in dh.iter_mut().zip(mask) {
                    *d *= m;
                }
            }
            if k == 0 {
                // residual: gradient flows to the projection as well
                let _ = self.proj.backward(&cache.input, &dh);
            }
            let dgelu: Vec<f64> = dh
                .iter()
                .zip(&cache.normed[k])
                .map(|(d, n)| d * gelu_deriv(*n))
                .collect();
            let dnorm = self.blocks[k].norm.backward(&cache.ln[k], &dgelu);
            let below = if k == 0 {
                cache.input.clone()
            } else {
                cache.block_out[k - 1].clone()
            };
            dh = self.blocks[k].dense.backward(&below, &dnorm);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            out.extend(b.dense.tensors_mut());
            out.extend(b.norm.tensors_mut());
        }
        out.extend(self.proj.tensors_mut());
        out.extend(self.out.tensors_mut());
        out
    }
}

/// Three-parameter monotone probability recalibration
/// p' = sigmoid(a ln p - b ln(1-p) + c) with a, b >= 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaCalibrator {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Set when the validation labels were single-class and the calibrator
    /// fell back to the identity map.
    pub identity_fallback: bool,
}

impl BetaCalibrator {
    pub fn identity() -> Self {
        BetaCalibrator {
            a: 1.0,
            b: 1.0,
            c: 0.0,
            identity_fallback: false,
        }
    }
}

const P_CLIP: f64 = 1e-6;

pub fn beta_apply(cal: &BetaCalibrator, p: f64) -> f64 {
    let p = p.clamp(P_CLIP, 1.0 - P_CLIP);
    sigmoid(cal.a * p.ln() - cal.b * (1.0 - p).ln() + cal.c)
}

/// Newton / IRLS fit of a logistic regression on the given design matrix
/// (deterministic; tiny ridge for stability).
fn fit_logistic(design: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
    let d = design[0].len();
    let mut beta = vec![0.0; d];
    for _ in 0..100 {
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for (row, yi) in design.iter().zip(y) {
            let z: f64 = row.iter().zip(&beta).map(|(x, b)| x * b).sum();
            let p = sigmoid(z);
            let r = p - *yi as f64;
            let w = (p * (1.0 - p)).max(1e-12);
            for i in 0..d {
                grad[i] += r * row[i];
                for j in 0..d {
                    hess[i * d + j] += w * row[i] * row[j];
                }
            }
        }
        for i in 0..d {
            hess[i * d + i] += 1e-8;
        }
        let Some(step) = solve_dense(&hess, &grad, d) else {
            break;
        };
        let mut max_step = 0.0f64;
        for i in 0..d {
            beta[i] -= step[i];
            max_step = max_step.max(step[i].abs());
        }
        if max_step < 1e-10 {
            break;
        }
    }
    beta
}

/// Gaussian elimination with partial pivoting for the small Newton systems.
fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot =
            (col..n).max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))?;
        if m[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
        }
        for row in (col + 1)..n {
            let f = m[row * n + col] / m[col * n + col];
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    Some(x)
}

/// Fit beta calibration on validation probabilities by maximum likelihood.
/// Negative shape coefficients are clipped at zero and the rest refitted,
/// preserving monotonicity.
pub fn beta_calibrate_fit(p_val: &[f64], y_val: &[u8]) -> BetaCalibrator {
    let n_pos = y_val.iter().filter(|&&v| v == 1).count();
    if p_val.is_empty() || n_pos == 0 || n_pos == y_val.len() {
        let mut cal = BetaCalibrator::identity();
        cal.identity_fallback = true;
        return cal;
    }
    let u: Vec<f64> = p_val
        .iter()
        .map(|p| p.clamp(P_CLIP, 1.0 - P_CLIP).ln())
        .collect();
    let v: Vec<f64> = p_val
        .iter()
        .map(|p| -(1.0 - p.clamp(P_CLIP, 1.0 - P_CLIP)).ln())
        .collect();

    let full: Vec<Vec<f64>> = u
        .iter()
        .zip(&v)
        .map(|(ui, vi)| vec![*ui, *vi, 1.0])
        .collect();
    let beta = fit_logistic(&full, y_val);
    let (a, b, c) = (beta[0], beta[1], beta[2]);
    if a >= 0.0 && b >= 0.0 {
        return BetaCalibrator {
            a,
            b,
            c,
            identity_fallback: false,
        };
    }
    if a < 0.0 {
        let design: Vec<Vec<f64>> = v.iter().map(|vi| vec![*vi, 1.0]).collect();
        let beta = fit_logistic(&design, y_val);
        return BetaCalibrator {
            a: 0.0,
            b: beta[0].max(0.0),
            c: beta[1],
            identity_fallback: false,
        };
    }
    let design: Vec<Vec<f64>> = u.iter().map(|ui| vec![*ui, 1.0]).collect();
    let beta = fit_logistic(&design, y_val);
    BetaCalibrator {
        a: beta[0].max(0.0),
        b: 0.0,
        c: beta[1],
        identity_fallback: false,
    }
}

/// Per-location model output: calibrated probabilities plus the covariance
/// summaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SusceptibilityVector {
    pub s_flood: f64,
    pub s_landslide: f64,
    pub logdet: f64,
    pub rho: f64,
}

/// Trained early-fusion artifact: scaler, network, calibrators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EfModel {
    pub scaler: FeatureScaler,
    pub net: MvgNet,
    pub cal_flood: BetaCalibrator,
    pub cal_landslide: BetaCalibrator,
}

impl EfModel {
    pub fn predict(&self, features: &[f64]) -> Result<SusceptibilityVector> {
        let x = self.scaler.apply(features);
        let cache = self.net.forward(&x, None)?;
        let raw = &cache.raw;
        let chol = assemble_cholesky(raw[2], raw[3], raw[4]);
        Ok(SusceptibilityVector {
            s_flood: beta_apply(&self.cal_flood, sigmoid(raw[0])),
            s_landslide: beta_apply(&self.cal_landslide, sigmoid(raw[1])),
            logdet: chol.logdet(),
            rho: chol.rho(),
        })
    }

    /// Uncalibrated sigmoid probabilities, used to fit the calibrators.
    pub fn predict_uncalibrated(&self, features: &[f64]) -> Result<(f64, f64)> {
        let x = self.scaler.apply(features);
        let cache = self.net.forward(&x, None)?;
        Ok((sigmoid(cache.raw[0]), sigmoid(cache.raw[1])))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_nll: f64,
}

fn mean_nll(net: &MvgNet, x: &[Vec<f64>], y: &[[f64; 2]]) -> Result<f64> {
    let mut total = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let cache = net.forward(xi, None)?;
        let raw = &cache.raw;
        let chol = assemble_cholesky(raw[2], raw[3], raw[4]);
        total += mvg_nll([raw[0], raw[1]], &chol, *yi)?;
    }
    Ok(total / x.len() as f64)
}

/// Train the MVG network with Adam and early stopping on validation NLL;
/// the best-epoch weights are restored before returning.
#[allow(clippy::too_many_arguments)]
pub fn mvg_train(
    net: &mut MvgNet,
    x_train: &[Vec<f64>],
    y_train: &[[f64; 2]],
    x_val: &[Vec<f64>],
    y_val: &[[f64; 2]],
    cfg: &crate::config::MvgTrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if x_train.is_empty() || x_val.is_empty() {
        return Err(Error::Validation(
            "training and validation splits must be non-empty".into(),
        ));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut rng = Rng::substream(seed, "mvg_train");
    let mut order: Vec<usize> = (0..x_train.len()).collect();

    let mut best_snapshot = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_nll: f64::INFINITY,
    };

    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut train_loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            for t in net.tensors_mut() {
                t.zero_grad();
            }
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let cache = net.forward(&x_train[i], Some(&mut rng))?;
                let raw: [f64; 5] = cache.raw.clone().try_into().expect("head width is 5");
                let (loss, grad) = mvg_nll_grad(&raw, y_train[i]);
                train_loss_sum += loss;
                let scaled: Vec<f64> = grad.iter().map(|g| g * inv).collect();
                net.backward(&cache, &scaled);
            }
            adam.begin_step();
            for t in net.tensors_mut() {
                adam.update(t);
            }
        }
        let train_nll = train_loss_sum / x_train.len() as f64;
        let val_nll = mean_nll(net, x_val, y_val)?;
        if !val_nll.is_finite() {
            return Err(Error::Numeric(format!(
                "validation NLL diverged at epoch {epoch}"
            )));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_nll,
            val_nll,
        });
        if val_nll < best_val {
            best_val = val_nll;
            best_epoch = epoch;
            best_snapshot = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    *net = best_snapshot;
    log.best_epoch = best_epoch;
    log.best_val_nll = best_val;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MvgTrainConfig;

    #[test]
    fn cholesky_identity_case() {
        let c = assemble_cholesky(0.0, 0.0, 0.0);
        assert_eq!(c.sigma(), [[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(c.logdet(), 0.0);
        assert_eq!(c.rho(), 0.0);
    }

    #[test]
    fn cholesky_hand_expansion() {
        let c = assemble_cholesky(0.0, 1.0, 0.0);
        assert_eq!(c.sigma(), [[1.0, 1.0], [1.0, 2.0]]);
        assert!((c.rho() - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.logdet(), 0.0);
    }

    #[test]
    fn cholesky_clamps_log_diagonal() {
        let c = assemble_cholesky(100.0, 0.0, -100.0);
        assert!((c.l11 - 8.0f64.exp()).abs() < 1e-9);
        assert!((c.l22 - (-8.0f64).exp()).abs() < 1e-18);
    }

    #[test]
    fn nll_reference_values() {
        let identity = assemble_cholesky(0.0, 0.0, 0.0);
        let v = mvg_nll([0.3, -0.2], &identity, [0.3, -0.2]).unwrap();
        assert!((v - TWO_PI_LN).abs() < 1e-12);
        let v = mvg_nll([0.0, 0.0], &identity, [1.0, 0.0]).unwrap();
        assert!((v - (TWO_PI_LN + 0.5)).abs() < 1e-12);
        // L = [[1,0],[1,1]]: z = (1, 0)
        let l = Cholesky2 {
            l11: 1.0,
            l21: 1.0,
            l22: 1.0,
        };
        let v = mvg_nll([0.0, 0.0], &l, [1.0, 1.0]).unwrap();
        assert!((v - (TWO_PI_LN + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn nll_diagonal_decomposes_into_univariate_sum() {
        let mut rng = Rng::new(17);
        for _ in 0..200 {
            let (a, b) = (rng.range(-2.0, 2.0), rng.range(-2.0, 2.0));
            let mu = [rng.normal(), rng.normal()];
            let y = [rng.normal(), rng.normal()];
            let l = assemble_cholesky(a, 0.0, b);
            let joint = mvg_nll(mu, &l, y).unwrap();
            let uni =
                |m: f64, s: f64, yv: f64| 0.5 * TWO_PI_LN + s.ln() + 0.5 * ((yv - m) / s).powi(2);
            let split = uni(mu[0], l.l11, y[0]) + uni(mu[1], l.l22, y[1]);
            assert!((joint - split).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_invariant_under_hazard_permutation() {
        let mut rng = Rng::new(23);
        for _ in 0..100 {
            let raw = [
                rng.normal(),
                rng.normal(),
                rng.range(-1.5, 1.5),
                rng.normal(),
                rng.range(-1.5, 1.5),
            ];
            let y = [rng.normal(), rng.normal()];
            let chol = assemble_cholesky(raw[2], raw[3], raw[4]);
            let direct = mvg_nll([raw[0], raw[1]], &chol, y).unwrap();
            // permute hazards: swap means, labels, and rows/cols of Sigma,
            // then re-factor the permuted covariance
            let s = chol.sigma();
            let sp = [[s[1][1], s[0][1]], [s[0][1], s[0][0]]];
            let l11 = sp[0][0].sqrt();
            let l21 = sp[0][1] / l11;
            let l22 = (sp[1][1] - l21 * l21).sqrt();
            let permuted = Cholesky2 { l11, l21, l22 };
            let swapped = mvg_nll([raw[1], raw[0]], &permuted, [y[1], y[0]]).unwrap();
            assert!((direct - swapped).abs() < 1e-10);
        }
    }

    #[test]
    fn raw_head_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let raw = [
                rng.normal(),
                rng.normal(),
                rng.range(-2.0, 2.0),
                rng.normal(),
                rng.range(-2.0, 2.0),
            ];
            let y = [
                if rng.uniform() < 0.5 { 1.0 } else { 0.0 },
                if rng.uniform() < 0.5 { 1.0 } else { 0.0 },
            ];
            let (_, grad) = mvg_nll_grad(&raw, y);
            let h = 1e-6;
            for k in 0..5 {
                let mut up = raw;
                let mut dn = raw;
                up[k] += h;
                dn[k] -= h;
                let (lu, _) = mvg_nll_grad(&up, y);
                let (ld, _) = mvg_nll_grad(&dn, y);
                let fd = (lu - ld) / (2.0 * h);
                assert!(
                    (grad[k] - fd).abs() < 1e-6,
                    "component {k}: {} vs {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn forward_deterministic_in_inference() {
        let mut rng = Rng::new(1);
        let net = MvgNet::init(6, &[16, 8], 0.01, 0.1, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let a = net.forward(&x, None).unwrap().raw;
        let b = net.forward(&x, None).unwrap().raw;
        assert_eq!(a, b);
    }

    #[test]
    fn forward_zero_weights_returns_bias() {
        let mut rng = Rng::new(2);
        let mut net = MvgNet::init(3, &[4], 0.0, 0.0, &mut rng);
        for t in net.tensors_mut() {
            for v in t.v.iter_mut() {
                *v = 0.0;
            }
        }
        net.out.b.v = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        let raw = net.forward(&[1.0, -2.0, 3.0], None).unwrap().raw;
        assert_eq!(raw, vec![0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn forward_finite_on_random_inputs() {
        let mut rng = Rng::new(3);
        let net = MvgNet::init(5, &[12, 6], 0.01, 0.1, &mut rng);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..5).map(|_| rng.normal() * 3.0).collect();
            let raw = net.forward(&x, None).unwrap().raw;
            assert!(raw.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let mut rng = Rng::new(4);
        let net = MvgNet::init(5, &[8], 0.0, 0.0, &mut rng);
        assert!(net.forward(&[1.0, 2.0], None).is_err());
    }

    #[test]
    fn covariance_valid_on_random_heads() {
        let mut rng = Rng::new(6);
        for _ in 0..100_000 {
            let chol = assemble_cholesky(
                rng.range(-20.0, 20.0),
                rng.normal() * 5.0,
                rng.range(-20.0, 20.0),
            );
            let s = chol.sigma();
            let det = s[0][0] * s[1][1] - s[0][1] * s[0][1];
            assert!(det > 0.0);
            assert!(chol.rho().abs() <= 1.0 + 1e-12);
        }
    }

    /// Full-network analytic gradients against central finite differences on
    /// a reduced (8-feature, hidden 8/4) network.
    #[test]
    fn network_gradient_check() {
        let mut rng = Rng::new(7);
        let mut net = MvgNet::init(8, &[8, 4], 0.0, 0.0, &mut rng);
        let n = 6;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..8).map(|_| rng.normal()).collect())
            .collect();
        let ys: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                [
                    (rng.uniform() < 0.5) as u8 as f64,
                    (rng.uniform() < 0.5) as u8 as f64,
                ]
            })
            .collect();

        let batch_loss = |net: &MvgNet| -> f64 {
            let mut total = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let cache = net.forward(x, None).unwrap();
                let raw: [f64; 5] = cache.raw.clone().try_into().unwrap();
                total += mvg_nll_grad(&raw, *y).0;
            }
            total / n as f64
        };

        for t in net.tensors_mut() {
            t.zero_grad();
        }
        let inv = 1.0 / n as f64;
        for (x, y) in xs.iter().zip(&ys) {
            let cache = net.forward(x, None).unwrap();
            let raw: [f64; 5] = cache.raw.clone().try_into().unwrap();
            let (_, grad) = mvg_nll_grad(&raw, *y);
            let scaled: Vec<f64> = grad.iter().map(|g| g * inv).collect();
            net.backward(&cache, &scaled);
        }

        let h = 1e-5;
        let n_tensors = net.tensors_mut().len();
        let mut max_rel = 0.0f64;
        for ti in 0..n_tensors {
            let len = net.tensors_mut()[ti].len();
            for k in 0..len {
                let analytic = net.tensors_mut()[ti].g[k];
                let orig = net.tensors_mut()[ti].v[k];
                net.tensors_mut()[ti].v[k] = orig + h;
                let up = batch_loss(&net);
                net.tensors_mut()[ti].v[k] = orig - h;
                let dn = batch_loss(&net);
                net.tensors_mut()[ti].v[k] = orig;
                let fd = (up - dn) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    fn threshold_dataset(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<[f64; 2]>) {
        let mut rng = Rng::new(seed);
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let y0 = (x[0] > 0.0) as u8 as f64;
            let y1 = (x[1] > 0.0) as u8 as f64;
            xs.push(x);
            ys.push([y0, y1]);
        }
        (xs, ys)
    }

    #[test]
    fn training_learns_threshold_labels() {
        let (xs, ys) = threshold_dataset(600, 9);
        let (xv, yv) = threshold_dataset(150, 10);
        let mut rng = Rng::new(11);
        let mut net = MvgNet::init(4, &[32, 16], 0.01, 0.1, &mut rng);
        let cfg = MvgTrainConfig {
            hidden: vec![32, 16],
            lr: 3e-3,
            batch: 64,
            max_epochs: 60,
            patience: 10,
            gaussian_noise_std: 0.01,
            dropout: 0.1,
        };
        mvg_train(&mut net, &xs, &ys, &xv, &yv, &cfg, 13).unwrap();
        let labels: Vec<u8> = xs.iter().map(|x| (x[0] > 0.0) as u8).collect();
        let probs: Vec<f64> = xs
            .iter()
            .map(|x| sigmoid(net.forward(x, None).unwrap().raw[0]))
            .collect();
        let auc = crate::metrics::auc_roc(&labels, &probs).unwrap();
        assert!(auc >= 0.95, "training AUC {auc}");
    }

    #[test]
    fn patience_zero_stops_one_epoch_after_best() {
        let (xs, ys) = threshold_dataset(120, 21);
        let (xv, yv) = threshold_dataset(40, 22);
        let mut rng = Rng::new(23);
        let mut net = MvgNet::init(4, &[8], 0.0, 0.0, &mut rng);
        let cfg = MvgTrainConfig {
            hidden: vec![8],
            lr: 1e-3,
            batch: 32,
            max_epochs: 200,
            patience: 0,
            gaussian_noise_std: 0.0,
            dropout: 0.0,
        };
        let log = mvg_train(&mut net, &xs, &ys, &xv, &yv, &cfg, 29).unwrap();
        let ran = log.epochs.len();
        if ran < cfg.max_epochs {
            assert_eq!(
                ran,
                log.best_epoch + 2,
                "stopped {ran}, best {}",
                log.best_epoch
            );
        }
    }

    #[test]
    fn beta_identity_parameters_are_identity_map() {
        let cal = BetaCalibrator::identity();
        for p in [0.01, 0.2, 0.5, 0.77, 0.99] {
            assert!((beta_apply(&cal, p) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn beta_fit_on_calibrated_data_is_near_identity() {
        let mut rng = Rng::new(31);
        let n = 4000;
        let p: Vec<f64> = (0..n).map(|_| rng.uniform().clamp(0.02, 0.98)).collect();
        let y: Vec<u8> = p.iter().map(|pi| (rng.uniform() < *pi) as u8).collect();
        let cal = beta_calibrate_fit(&p, &y);
        let raw_brier = crate::metrics::brier(&y, &p);
        let adj: Vec<f64> = p.iter().map(|pi| beta_apply(&cal, *pi)).collect();
        let cal_brier = crate::metrics::brier(&y, &adj);
        assert!((cal_brier - raw_brier).abs() < 1e-3);
    }

    #[test]
    fn beta_fit_fixes_systematic_miscalibration() {
        let mut rng = Rng::new(37);
        let n = 4000;
        let truth: Vec<f64> = (0..n).map(|_| rng.uniform().clamp(0.02, 0.98)).collect();
        let y: Vec<u8> = truth.iter().map(|pi| (rng.uniform() < *pi) as u8).collect();
        // systematically under-confident reports
        let reported: Vec<f64> = truth.iter().map(|p| p * p).collect();
        let cal = beta_calibrate_fit(&reported, &y);
        let raw_brier = crate::metrics::brier(&y, &reported);
        let adj: Vec<f64> = reported.iter().map(|p| beta_apply(&cal, *p)).collect();
        let cal_brier = crate::metrics::brier(&y, &adj);
        assert!(
            cal_brier < raw_brier,
            "calibrated {cal_brier} vs raw {raw_brier}"
        );
    }

    #[test]
    fn beta_fit_single_class_falls_back_to_identity() {
        let cal = beta_calibrate_fit(&[0.3, 0.6], &[1, 1]);
        assert!(cal.identity_fallback);
        assert!((beta_apply(&cal, 0.4) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn ef_predict_outputs() {
        let mut rng = Rng::new(41);
        let mut net = MvgNet::init(2, &[4], 0.0, 0.0, &mut rng);
        for t in net.tensors_mut() {
            for v in t.v.iter_mut() {
                *v = 0.0;
            }
        }
        // raw = bias = (0, 0, 0, 1, 0): mu = 0, L = [[1,0],[1,1]]
        net.out.b.v = vec![0.0, 0.0, 0.0, 1.0, 0.0];
        let model = EfModel {
            scaler: FeatureScaler {
                mean: vec![0.0, 0.0],
                std: vec![1.0, 1.0],
            },
            net,
            cal_flood: BetaCalibrator::identity(),
            cal_landslide: BetaCalibrator::identity(),
        };
        let out = model.predict(&[0.3, -0.4]).unwrap();
        assert!((out.s_flood - 0.5).abs() < 1e-9);
        assert!((out.s_landslide - 0.5).abs() < 1e-9);
        assert!((out.rho - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
        assert!(out.logdet.abs() < 1e-12);
    }
}
