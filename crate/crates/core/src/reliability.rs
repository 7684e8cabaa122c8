//! Per-token teacher reliability: confidence, confidence weights, agreement
//! and the sigmoid routing gate for a pair of teachers.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmath::{entropy, jsd, sigmoid, DistError, ProbDist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReliabilityError {
    #[error("gate steepness must be positive, got {0}")]
    Steepness(f64),
    #[error("gate threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("weight temperature must be positive, got {0}")]
    WeightTemperature(f64),
    #[error(transparent)]
    Dist(#[from] DistError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityConfig {
    #[serde(default = "default_k")]
    pub gate_steepness: f64,
    #[serde(default = "default_delta")]
    pub gate_threshold: f64,
    #[serde(default = "default_tau_w")]
    pub weight_temperature: f64,
}

fn default_k() -> f64 {
    5.0
}
fn default_delta() -> f64 {
    0.5
}
fn default_tau_w() -> f64 {
    1.0
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            gate_steepness: default_k(),
            gate_threshold: default_delta(),
            weight_temperature: default_tau_w(),
        }
    }
}

impl ReliabilityConfig {
    pub fn new(gate_steepness: f64, gate_threshold: f64, weight_temperature: f64) -> Result<Self, ReliabilityError> {
        let cfg = Self {
            gate_steepness,
            gate_threshold,
            weight_temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ReliabilityError> {
        if !(self.gate_steepness.is_finite() && self.gate_steepness > 0.0) {
            return Err(ReliabilityError::Steepness(self.gate_steepness));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(ReliabilityError::Threshold(self.gate_threshold));
        }
        if !(self.weight_temperature.is_finite() && self.weight_temperature > 0.0) {
            return Err(ReliabilityError::WeightTemperature(self.weight_temperature));
        }
        Ok(())
    }
}

/// Reliability decomposition of one target position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenReliability {
    pub c1: f64,
    pub c2: f64,
    pub w1: f64,
    pub w2: f64,
    pub agreement: f64,
    pub lambda: f64,
}

/// `1 − H(p) / ln |V|`. `|V|` is the length of `p`, so a densified top-k
/// distribution is still normalized by the full vocabulary.
pub fn confidence(p: &ProbDist) -> f64 {
    let max = (p.len() as f64).ln();
    (1.0 - entropy(p) / max).clamp(0.0, 1.0)
}

pub fn confidence_weights(c1: f64, c2: f64, cfg: &ReliabilityConfig) -> (f64, f64) {
    // two-way softmax == sigmoid of the scaled difference
    let w1 = sigmoid((c1 - c2) / cfg.weight_temperature);
    (w1, 1.0 - w1)
}

pub fn agreement(p1: &ProbDist, p2: &ProbDist) -> Result<f64, DistError> {
    Ok((1.0 - jsd(p1, p2)? / LN_2).clamp(0.0, 1.0))
}

pub fn gate(a: f64, cfg: &ReliabilityConfig) -> f64 {
    sigmoid(cfg.gate_steepness * (a - cfg.gate_threshold))
}

pub fn token_reliability(p1: &ProbDist, p2: &ProbDist, cfg: &ReliabilityConfig) -> Result<TokenReliability, DistError> {
    let c1 = confidence(p1);
    let c2 = confidence(p2);
    let (w1, w2) = confidence_weights(c1, c2, cfg);
    let a = agreement(p1, p2)?;
    Ok(TokenReliability {
        c1,
        c2,
        w1,
        w2,
        agreement: a,
        lambda: gate(a, cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&ProbDist::uniform(4).unwrap()), 0.0);
        assert_eq!(confidence(&ProbDist::one_hot(4, 2).unwrap()), 1.0);
        let h = -(0.97f64 * 0.97f64.ln() + 3.0 * 0.01 * 0.01f64.ln());
        let c = confidence(&pd(&[0.97, 0.01, 0.01, 0.01]));
        assert_abs_diff_eq!(c, 1.0 - h / 4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(c, 0.87903, epsilon = 1e-5);
    }

    #[test]
    fn weights_examples() {
        let cfg = ReliabilityConfig::default();
        assert_eq!(confidence_weights(0.7, 0.7, &cfg), (0.5, 0.5));
        let (w1, w2) = confidence_weights(0.9, 0.6, &cfg);
        let e1 = 0.9f64.exp();
        let e2 = 0.6f64.exp();
        assert_abs_diff_eq!(w1, e1 / (e1 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(w2, e2 / (e1 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(w1, 0.5745, epsilon = 1e-4);
        let sharp = ReliabilityConfig::new(5.0, 0.5, 1e-6).unwrap();
        let (w1, w2) = confidence_weights(1.0, 0.0, &sharp);
        assert!(w1 > 1.0 - 1e-12 && w2 < 1e-12);
    }

    #[test]
    fn gate_examples() {
        let cfg = ReliabilityConfig::default();
        assert_eq!(gate(0.5, &cfg), 0.5);
        assert_abs_diff_eq!(gate(1.0, &cfg), sig(2.5), epsilon = 1e-15);
        assert_abs_diff_eq!(gate(1.0, &cfg), 0.924142, epsilon = 1e-6);
        assert_abs_diff_eq!(gate(0.0, &cfg), 0.075858, epsilon = 1e-6);
    }

    #[test]
    fn agreement_examples() {
        let p = pd(&[0.2, 0.3, 0.5]);
        assert_eq!(agreement(&p, &p).unwrap(), 1.0);
        let a = ProbDist::one_hot(3, 0).unwrap();
        let b = ProbDist::one_hot(3, 1).unwrap();
        assert_eq!(agreement(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn token_reliability_examples() {
        let cfg = ReliabilityConfig::default();
        let oh = ProbDist::one_hot(5, 1).unwrap();
        let r = token_reliability(&oh, &oh, &cfg).unwrap();
        assert_eq!((r.c1, r.c2, r.w1, r.w2, r.agreement), (1.0, 1.0, 0.5, 0.5, 1.0));
        assert_abs_diff_eq!(r.lambda, 0.924142, epsilon = 1e-6);

        let other = ProbDist::one_hot(5, 3).unwrap();
        let r = token_reliability(&oh, &other, &cfg).unwrap();
        assert_eq!(r.agreement, 0.0);
        assert_abs_diff_eq!(r.lambda, 0.0759, epsilon = 1e-4);

        let u = ProbDist::uniform(5).unwrap();
        let r = token_reliability(&u, &u, &cfg).unwrap();
        assert_eq!((r.c1, r.c2, r.w1, r.w2, r.agreement), (0.0, 0.0, 0.5, 0.5, 1.0));
        assert_abs_diff_eq!(r.lambda, sig(2.5), epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(ReliabilityConfig::new(0.0, 0.5, 1.0).is_err());
        assert!(ReliabilityConfig::new(5.0, 1.5, 1.0).is_err());
        assert!(ReliabilityConfig::new(5.0, 0.5, 0.0).is_err());
    }

    fn dist(n: usize) -> impl Strategy<Value = ProbDist> {
        prop::collection::vec(1e-6f64..1.0, n).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            ProbDist::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn swap_symmetry(p in dist(6), q in dist(6)) {
            let cfg = ReliabilityConfig::default();
            let a = token_reliability(&p, &q, &cfg).unwrap();
            let b = token_reliability(&q, &p, &cfg).unwrap();
            prop_assert_eq!((a.c1, a.c2), (b.c2, b.c1));
            prop_assert!((a.w1 - b.w2).abs() < 1e-15 && (a.w2 - b.w1).abs() < 1e-15);
            prop_assert!((a.agreement - b.agreement).abs() < 1e-12);
            prop_assert!((a.lambda - b.lambda).abs() < 1e-12);
        }

        #[test]
        fn sharper_teacher_never_loses_weight(p in dist(6), q in dist(6), power in 1.0f64..4.0) {
            // raising to a power > 1 and renormalizing lowers entropy
            let sharp: Vec<f64> = p.as_slice().iter().map(|v| v.powf(power)).collect();
            let s: f64 = sharp.iter().sum();
            let sharp = ProbDist::new(sharp.into_iter().map(|v| v / s).collect()).unwrap();
            prop_assume!(entropy(&sharp) <= entropy(&p));
            let cfg = ReliabilityConfig::default();
            let before = token_reliability(&p, &q, &cfg).unwrap();
            let after = token_reliability(&sharp, &q, &cfg).unwrap();
            prop_assert!(after.w1 >= before.w1 - 1e-15);
        }

        #[test]
        fn gate_strictly_increasing(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let cfg = ReliabilityConfig::default();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(gate(hi, &cfg) > gate(lo, &cfg));
        }
    }
}
