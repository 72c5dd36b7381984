//! Detection losses with hand-written gradients.

use serde::{Deserialize, Serialize};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

/// Loss hyperparameters: focal shape and the weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub w_reg: f64,
    pub w_fg: f64,
    pub w_dis: f64,
    pub w_iou: f64,
}

impl LossConfig {
    pub fn waymo() -> Self {
        Self {
            focal_alpha: 1.0,
            focal_gamma: 2.0,
            w_reg: 2.0,
            w_fg: 1.0,
            w_dis: 0.75,
            w_iou: 2.0,
        }
    }

    pub fn once() -> Self {
        Self {
            w_reg: 0.75,
            ..Self::waymo()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let w = [self.w_reg, self.w_fg, self.w_dis, self.w_iou];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(crate::Error::config("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::waymo()
    }
}

fn clamp_prob(h: f64) -> (f64, bool) {
    if h < PROB_EPS {
        (PROB_EPS, true)
    } else if h > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (h, false)
    }
}

/// Binary focal loss over a probability map with a 0/1 target,
/// normalized by `max(1, #positives)`.
pub fn focal_loss(h: &[f64], target: &[f64], alpha: f64, gamma: f64) -> f64 {
    let n_pos = target.iter().filter(|&&t| t > 0.5).count().max(1) as f64;
    focal_loss_with_norm(h, target, alpha, gamma, n_pos)
}

pub fn focal_loss_with_norm(h: &[f64], target: &[f64], alpha: f64, gamma: f64, n_pos: f64) -> f64 {
    let mut acc = 0.0;
    for (&hv, &t) in h.iter().zip(target) {
        let (p, _) = clamp_prob(hv);
        let ht = if t > 0.5 { p } else { 1.0 - p };
        acc += -alpha * (1.0 - ht).powf(gamma) * ht.ln();
    }
    acc / n_pos
}

pub fn focal_loss_vjp(h: &[f64], target: &[f64], alpha: f64, gamma: f64, n_pos: f64, up: f64) -> Vec<f64> {
    h.iter()
        .zip(target)
        .map(|(&hv, &t)| {
            let (p, clamped) = clamp_prob(hv);
            if clamped {
                return 0.0;
            }
            let pos = t > 0.5;
            let ht = if pos { p } else { 1.0 - p };
            let one_m = 1.0 - ht;
            let d_ht = -alpha * (-gamma * one_m.powf(gamma - 1.0) * ht.ln() + one_m.powf(gamma) / ht);
            let sign = if pos { 1.0 } else { -1.0 };
            up * sign * d_ht / n_pos
        })
        .collect()
}

/// Penalty-reduced focal loss on Gaussian-splatted heatmap targets:
/// peaks (`t == 1`) contribute `-(1-p)^2 log p`, everything else
/// `-(1-t)^4 p^2 log(1-p)`; normalized by `max(1, #peaks)`.
pub fn gaussian_focal_loss(h: &[f64], target: &[f64]) -> f64 {
    let n_pos = target.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    let mut acc = 0.0;
    for (&hv, &t) in h.iter().zip(target) {
        let (p, _) = clamp_prob(hv);
        if t == 1.0 {
            acc -= (1.0 - p).powi(2) * p.ln();
        } else {
            acc -= (1.0 - t).powi(4) * p * p * (1.0 - p).ln();
        }
    }
    acc / n_pos
}

pub fn gaussian_focal_loss_vjp(h: &[f64], target: &[f64], up: f64) -> Vec<f64> {
    let n_pos = target.iter().filter(|&&t| t == 1.0).count().max(1) as f64;
    h.iter()
        .zip(target)
        .map(|(&hv, &t)| {
            let (p, clamped) = clamp_prob(hv);
            if clamped {
                return 0.0;
            }
            let d = if t == 1.0 {
                2.0 * (1.0 - p) * p.ln() - (1.0 - p).powi(2) / p
            } else {
                let w = (1.0 - t).powi(4);
                -w * (2.0 * p * (1.0 - p).ln() - p * p / (1.0 - p))
            };
            up * d / n_pos
        })
        .collect()
}

fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Element-wise smooth-L1 summed, each element optionally weighted
/// (a 0/1 weight acts as a mask).
pub fn smooth_l1(pred: &[f64], target: &[f64], weights: Option<&[f64]>) -> f64 {
    assert_eq!(pred.len(), target.len(), "smooth_l1: length mismatch");
    pred.iter()
        .zip(target)
        .enumerate()
        .map(|(i, (p, t))| weights.map_or(1.0, |w| w[i]) * smooth_l1_scalar(p - t))
        .sum()
}

pub fn smooth_l1_vjp(pred: &[f64], target: &[f64], weights: Option<&[f64]>, up: f64) -> Vec<f64> {
    pred.iter()
        .zip(target)
        .enumerate()
        .map(|(i, (p, t))| up * weights.map_or(1.0, |w| w[i]) * smooth_l1_grad(p - t))
        .collect()
}
