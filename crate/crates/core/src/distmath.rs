//! Probability-vector mathematics over a finite vocabulary.
//!
//! Everything here is natural-log, double precision and allocation-light:
//! temperature softmax, Shannon entropy, KL and Jensen-Shannon divergence.
//! The slice-level helpers (`softmax_into`, `log_softmax_into`, ...) are the
//! hot-path primitives used by the loss module; the typed wrappers enforce
//! the distribution invariants at construction.

use std::f64::consts::LN_2;

use thiserror::Error;

/// Absolute tolerance on the total mass of a [`ProbDist`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Floor applied to `q` entries inside [`kl`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("negative probability {value} at index {index}")]
    Negative { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },
    #[error("vocabulary of size {0} is too small (need at least 2)")]
    VocabTooSmall(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
}

/// A validated probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        if probs.len() < 2 {
            return Err(DistError::VocabTooSmall(probs.len()));
        }
        let mut sum = 0.0;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(DistError::NonFinite { index, value });
            }
            if value < 0.0 {
                return Err(DistError::Negative { index, value });
            }
            sum += value;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DistError::NotNormalized { sum });
        }
        Ok(Self(probs))
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Result<Self, DistError> {
        if n < 2 {
            return Err(DistError::VocabTooSmall(n));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Point mass on `index`.
    pub fn one_hot(n: usize, index: usize) -> Result<Self, DistError> {
        if n < 2 {
            return Err(DistError::VocabTooSmall(n));
        }
        if index >= n {
            return Err(DistError::DimensionMismatch { left: index, right: n });
        }
        let mut p = vec![0.0; n];
        p[index] = 1.0;
        Ok(Self(p))
    }

    /// Caller guarantees the invariants (used by constructive code paths).
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= NORMALIZATION_TOL);
        Self(probs)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pre-softmax scores; every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self, DistError> {
        if logits.len() < 2 {
            return Err(DistError::VocabTooSmall(logits.len()));
        }
        if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DistError::NonFinite { index, value });
        }
        Ok(Self(logits))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(tau: f64) -> Result<Self, DistError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(DistError::InvalidTemperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = softmax(scores / tau)`. Entries of `scores` may be `-inf` (zero
/// mass) as long as at least one is finite.
pub fn softmax_into(scores: &[f64], tau: f64, out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        // (s - max) / tau is <= 0, so a tiny tau cannot overflow.
        *o = ((s - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `out = log_softmax(scores / tau)`; `-inf` scores map to `-inf`.
pub fn log_softmax_into(scores: &[f64], tau: f64, out: &mut [f64]) {
    debug_assert_eq!(scores.len(), out.len());
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max) / tau;
        total += o.exp();
    }
    let log_z = total.ln();
    for o in out.iter_mut() {
        *o -= log_z;
    }
}

/// Entropy in nats of an arbitrary non-negative vector assumed normalized.
pub fn entropy_slice(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `Σ p (log p − log q)` with `log q` supplied directly; `p = 0` terms vanish.
pub fn kl_with_log_q(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &lq)| pv * (pv.ln() - lq))
        .sum()
}

pub fn softmax_t(z: &LogitVector, tau: Temperature) -> ProbDist {
    let mut out = vec![0.0; z.len()];
    softmax_into(z.as_slice(), tau.get(), &mut out);
    ProbDist::from_vec_unchecked(out)
}

/// Shannon entropy in nats, in `[0, ln |V|]`.
pub fn entropy(p: &ProbDist) -> f64 {
    let max = (p.len() as f64).ln();
    entropy_slice(p.as_slice()).clamp(0.0, max)
}

fn check_dims(p: &ProbDist, q: &ProbDist) -> Result<(), DistError> {
    if p.len() != q.len() {
        return Err(DistError::DimensionMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    Ok(())
}

/// `KL(p ‖ q)` in nats. `q` is floored at [`KL_FLOOR`].
pub fn kl(p: &ProbDist, q: &ProbDist) -> Result<f64, DistError> {
    check_dims(p, q)?;
    let value: f64 = p
        .as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(KL_FLOOR)).ln())
        .sum();
    // Gibbs: any negative value is rounding.
    Ok(value.max(0.0))
}

/// Jensen-Shannon divergence in nats, in `[0, ln 2]`.
pub fn jsd(p: &ProbDist, q: &ProbDist) -> Result<f64, DistError> {
    check_dims(p, q)?;
    let mut total = 0.0;
    for (&pv, &qv) in p.as_slice().iter().zip(q.as_slice()) {
        let m = 0.5 * (pv + qv);
        if pv > 0.0 {
            total += 0.5 * pv * (pv / m).ln();
        }
        if qv > 0.0 {
            total += 0.5 * qv * (qv / m).ln();
        }
    }
    Ok(total.clamp(0.0, LN_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pd(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    fn normalize(raw: Vec<f64>) -> ProbDist {
        let s: f64 = raw.iter().sum();
        ProbDist::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_t(&LogitVector::new(vec![0.0, 0.0]).unwrap(), Temperature::ONE);
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax_t(
            &LogitVector::new(vec![1.0, 0.0]).unwrap(),
            Temperature::new(1e6).unwrap(),
        );
        let eps = p.as_slice()[0] - 0.5;
        assert!(eps > 0.0 && eps < 1e-6);

        // oracle: exp(2/0.8) / (exp(2/0.8) + 2)
        let p = softmax_t(
            &LogitVector::new(vec![2.0, 0.0, 0.0]).unwrap(),
            Temperature::new(0.8).unwrap(),
        );
        let e = (2.5f64).exp();
        assert_abs_diff_eq!(p.as_slice()[0], e / (e + 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p.as_slice()[1], 1.0 / (e + 2.0), epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            LogitVector::new(vec![0.0, f64::NAN]),
            Err(DistError::NonFinite { index: 1, .. })
        ));
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(ProbDist::new(vec![1.0]).is_err());
        assert!(ProbDist::new(vec![0.6, 0.6]).is_err());
        assert!(ProbDist::new(vec![1.2, -0.2]).is_err());
        let a = ProbDist::uniform(3).unwrap();
        let b = ProbDist::uniform(4).unwrap();
        assert!(kl(&a, &b).is_err());
        assert!(jsd(&a, &b).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&pd(&[1.0, 0.0, 0.0, 0.0])), 0.0);
        assert_abs_diff_eq!(entropy(&ProbDist::uniform(4).unwrap()), 4f64.ln(), epsilon = 1e-15);
        let h = entropy(&pd(&[0.97, 0.01, 0.01, 0.01]));
        let oracle = -(0.97f64 * 0.97f64.ln() + 3.0 * 0.01 * 0.01f64.ln());
        assert_abs_diff_eq!(h, oracle, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.16771, epsilon = 1e-5);
    }

    #[test]
    fn kl_and_jsd_examples() {
        let u = ProbDist::uniform(5).unwrap();
        assert_eq!(kl(&u, &u).unwrap(), 0.0);
        assert_abs_diff_eq!(kl(&pd(&[1.0, 0.0]), &pd(&[0.5, 0.5])).unwrap(), LN_2, epsilon = 1e-15);
        assert_eq!(jsd(&u, &u).unwrap(), 0.0);
        assert_abs_diff_eq!(jsd(&pd(&[1.0, 0.0]), &pd(&[0.0, 1.0])).unwrap(), LN_2, epsilon = 1e-15);
        // floor keeps a zero in q finite
        let v = kl(&pd(&[0.5, 0.5]), &pd(&[1.0, 0.0])).unwrap();
        assert_abs_diff_eq!(v, 0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_FLOOR).ln(), epsilon = 1e-9);
    }

    fn dist_strategy(n: usize) -> impl Strategy<Value = ProbDist> {
        prop::collection::vec(1e-6f64..1.0, n).prop_map(normalize)
    }

    proptest! {
        #[test]
        fn kl_matches_summation_oracle(p in dist_strategy(8), q in dist_strategy(8)) {
            let mut oracle = 0.0;
            for i in 0..8 {
                oracle += p.as_slice()[i] * (p.as_slice()[i].ln() - q.as_slice()[i].ln());
            }
            prop_assert!((kl(&p, &q).unwrap() - oracle.max(0.0)).abs() < 1e-12);
        }

        #[test]
        fn jsd_symmetric_and_bounded(p in dist_strategy(8), q in dist_strategy(8)) {
            let a = jsd(&p, &q).unwrap();
            let b = jsd(&q, &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=LN_2).contains(&a));
            prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn softmax_shift_invariant(
            z in prop::collection::vec(-20.0f64..20.0, 2..10),
            shift in -50.0f64..50.0,
            tau in 0.05f64..10.0,
        ) {
            let tau = Temperature::new(tau).unwrap();
            let a = softmax_t(&LogitVector::new(z.clone()).unwrap(), tau);
            let b = softmax_t(&LogitVector::new(z.iter().map(|v| v + shift).collect()).unwrap(), tau);
            prop_assert!((a.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn entropy_bounds(p in dist_strategy(6)) {
            let h = entropy(&p);
            prop_assert!(h >= 0.0 && h <= 6f64.ln());
        }
    }
}
