//! Binary classification losses and their gradients with respect to logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_lengths(y: &[u8], p: &[f64]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: p.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidInput("loss of an empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy.
pub fn bce_loss(y: &[u8], p: &[f64]) -> Result<f64> {
    check_lengths(y, p)?;
    let total: f64 = y
        .iter()
        .zip(p)
        .map(|(&t, &q)| {
            let q = clamp_prob(q);
            if t == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// d(mean BCE)/dz for sigmoid outputs `p = sigmoid(z)`.
pub fn bce_grad_logits(y: &[u8], p: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    y.iter().zip(p).map(|(&t, &q)| (q - t as f64) / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub benign_weight: f64,
    pub malicious_weight: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            benign_weight: 1.0,
            malicious_weight: 5.0,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("focal alpha must lie in (0, 1)".into()));
        }
        if !(self.benign_weight > 0.0 && self.malicious_weight > 0.0) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        Ok(())
    }

    /// (weight * alpha_t, p_t, sign of dp_t/dz) for one sample.
    fn terms(&self, y: u8, p: f64) -> (f64, f64, f64) {
        let p = clamp_prob(p);
        if y == 1 {
            (self.malicious_weight * self.alpha, p, 1.0)
        } else {
            (self.benign_weight * (1.0 - self.alpha), 1.0 - p, -1.0)
        }
    }
}

/// Mean of `w_y * alpha_t * (1 - p_t)^gamma * -ln(p_t)`; class weight and
/// alpha compose multiplicatively.
pub fn focal_loss(y: &[u8], p: &[f64], cfg: &FocalLossConfig) -> Result<f64> {
    check_lengths(y, p)?;
    let total: f64 = y
        .iter()
        .zip(p)
        .map(|(&t, &q)| {
            let (scale, pt, _) = cfg.terms(t, q);
            -scale * (1.0 - pt).powf(cfg.gamma) * pt.ln()
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// d(mean focal loss)/dz for sigmoid outputs `p = sigmoid(z)`.
pub fn focal_grad_logits(y: &[u8], p: &[f64], cfg: &FocalLossConfig) -> Vec<f64> {
    let n = y.len() as f64;
    y.iter()
        .zip(p)
        .map(|(&t, &q)| {
            let (scale, pt, sign) = cfg.terms(t, q);
            let g = scale * (1.0 - pt).powf(cfg.gamma) * (cfg.gamma * pt * pt.ln() - (1.0 - pt));
            sign * g / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!(bce_loss(&[1], &[1.0]).unwrap() < 1e-11);
        assert!((bce_loss(&[1], &[0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&[1, 0], &[0.5]).is_err());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let y = [1u8, 0, 0, 1, 1, 0, 1, 0];
        let p: [f64; 8] = [0.9, 0.2, 0.7, 0.35, 0.5, 0.01, 0.99, 0.6];
        let mut acc = 0.0;
        for i in 0..8 {
            let t = y[i] as f64;
            acc += -(t * p[i].ln() + (1.0 - t) * (1.0 - p[i]).ln());
        }
        assert!((bce_loss(&y, &p).unwrap() - acc / 8.0).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_value() {
        let cfg = FocalLossConfig::default();
        let expected = 5.0 * 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((focal_loss(&[1], &[0.5], &cfg).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.2166).abs() < 5e-5);
        assert!(focal_loss(&[1], &[1.0], &cfg).unwrap() < 1e-20);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let cfg = FocalLossConfig {
            gamma: 0.0,
            alpha: 0.5,
            benign_weight: 1.0,
            malicious_weight: 1.0,
        };
        let y = [1u8, 0, 1, 0];
        let p = [0.3, 0.3, 0.8, 0.95];
        let fl = focal_loss(&y, &p, &cfg).unwrap();
        assert!((fl - 0.5 * bce_loss(&y, &p).unwrap()).abs() < 1e-12);
        let gf = focal_grad_logits(&y, &p, &cfg);
        let gb = bce_grad_logits(&y, &p);
        for (a, b) in gf.iter().zip(&gb) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_limits() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(FocalLossConfig::default().validate().is_ok());
        let bad = FocalLossConfig {
            alpha: 1.0,
            ..FocalLossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
