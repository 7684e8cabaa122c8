//! Distillation objectives with hand-derived gradients.
//!
//! Every loss here works on one target sequence ([`TokenBatch`]) and returns
//! its value together with the gradient with respect to the student logits
//! (and, for hidden-state matching, the student hidden states and the
//! projection). Teachers are frozen: nothing flows back into teacher scores,
//! the reliability weights or the gate.
//!
//! Aggregation is always a mean over the masked (non-padding) positions, and
//! all reductions run in position order so results are reproducible bit for
//! bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmath::{
    entropy_slice, kl, kl_with_log_q, log_softmax_into, sigmoid, softmax_into, DistError, LogitVector, ProbDist,
    Temperature,
};
use crate::reliability::{token_reliability, ReliabilityConfig, TokenReliability};

/// Student entropy floor used by the divergence-preservation term.
pub const ENTROPY_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("mask selects no positions")]
    EmptyMask,
    #[error("teacher {0} scores are required for this loss")]
    MissingTeacher(u8),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gold id {id} at position {position} is outside the vocabulary of size {vocab}")]
    GoldOutOfRange { position: usize, id: usize, vocab: usize },
    #[error("zero-norm {which} hidden vector at position {position}")]
    ZeroNorm { which: &'static str, position: usize },
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("invalid adaptive temperature range [{tau_min}, {tau_max}]")]
    TauRange { tau_min: f64, tau_max: f64 },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("anchor must be finite, got {0}")]
    Anchor(f64),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Log-space teacher scores for one position. Entries are finite or `-inf`
/// (outside a cached top-k support); at least one entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherScores(Vec<f64>);

impl TeacherScores {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.len() < 2 {
            return Err(DistError::VocabTooSmall(scores.len()).into());
        }
        if let Some((index, &value)) = scores
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v == f64::INFINITY)
        {
            return Err(DistError::NonFinite { index, value }.into());
        }
        if !scores.iter().any(|v| v.is_finite()) {
            return Err(LossError::Shape("teacher scores have no finite entry".into()));
        }
        Ok(Self(scores))
    }

    pub fn from_logits(z: &LogitVector) -> Self {
        Self(z.as_slice().to_vec())
    }

    /// Log-probabilities of `p`; zero entries become `-inf`.
    pub fn from_dist(p: &ProbDist) -> Self {
        Self(
            p.as_slice()
                .iter()
                .map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
                .collect(),
        )
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

    pub fn dist(&self, tau: f64) -> ProbDist {
        let mut out = vec![0.0; self.0.len()];
        softmax_into(&self.0, tau, &mut out);
        ProbDist::from_vec_unchecked(out)
    }
}

/// One teacher-forced target sequence with its supervision.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    gold_ids: Vec<usize>,
    mask: Vec<bool>,
    student_logits: Vec<LogitVector>,
    teacher1: Option<Vec<TeacherScores>>,
    teacher2: Option<Vec<TeacherScores>>,
    vocab: usize,
}

impl TokenBatch {
    pub fn new(gold_ids: Vec<usize>, mask: Vec<bool>, student_logits: Vec<LogitVector>) -> Result<Self> {
        let t = gold_ids.len();
        if t == 0 {
            return Err(LossError::Shape("sequence length must be at least 1".into()));
        }
        if mask.len() != t || student_logits.len() != t {
            return Err(LossError::Shape(format!(
                "gold {t}, mask {}, student logits {}",
                mask.len(),
                student_logits.len()
            )));
        }
        let vocab = student_logits[0].len();
        if let Some(bad) = student_logits.iter().find(|z| z.len() != vocab) {
            return Err(LossError::Shape(format!(
                "student logits of size {} and {vocab}",
                bad.len()
            )));
        }
        for (position, &id) in gold_ids.iter().enumerate() {
            if id >= vocab {
                return Err(LossError::GoldOutOfRange { position, id, vocab });
            }
        }
        Ok(Self {
            gold_ids,
            mask,
            student_logits,
            teacher1: None,
            teacher2: None,
            vocab,
        })
    }

    fn check_teacher(&self, scores: &[TeacherScores]) -> Result<()> {
        if scores.len() != self.len() {
            return Err(LossError::Shape(format!(
                "teacher has {} positions, sequence has {}",
                scores.len(),
                self.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| s.len() != self.vocab) {
            return Err(LossError::Shape(format!(
                "teacher vocabulary {} vs student {}",
                bad.len(),
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn with_teacher1(mut self, scores: Vec<TeacherScores>) -> Result<Self> {
        self.check_teacher(&scores)?;
        self.teacher1 = Some(scores);
        Ok(self)
    }

    pub fn with_teacher2(mut self, scores: Vec<TeacherScores>) -> Result<Self> {
        self.check_teacher(&scores)?;
        self.teacher2 = Some(scores);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.gold_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold_ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn gold_ids(&self) -> &[usize] {
        &self.gold_ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn student_logits(&self) -> &[LogitVector] {
        &self.student_logits
    }

    pub fn teacher1(&self) -> Option<&[TeacherScores]> {
        self.teacher1.as_deref()
    }

    pub fn teacher2(&self) -> Option<&[TeacherScores]> {
        self.teacher2.as_deref()
    }

    fn masked_count(&self) -> Result<usize> {
        masked_count(&self.mask)
    }

    fn zero_grad(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.vocab]; self.len()]
    }

    fn both_teachers(&self) -> Result<(&[TeacherScores], &[TeacherScores])> {
        let t1 = self.teacher1().ok_or(LossError::MissingTeacher(1))?;
        let t2 = self.teacher2().ok_or(LossError::MissingTeacher(2))?;
        Ok((t1, t2))
    }
}

fn masked_count(mask: &[bool]) -> Result<usize> {
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(LossError::EmptyMask),
        n => Ok(n),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_alpha_kd")]
    pub alpha_kd: f64,
    #[serde(default)]
    pub alpha_inter: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_clamp")]
    pub cpdp_clamp: f64,
}

fn default_alpha_kd() -> f64 {
    0.01
}
fn default_mu() -> f64 {
    0.05
}
fn default_clamp() -> f64 {
    100.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_kd: default_alpha_kd(),
            alpha_inter: 0.0,
            mu: default_mu(),
            cpdp_clamp: default_clamp(),
        }
    }
}

impl LossWeights {
    pub fn new(alpha_kd: f64, alpha_inter: f64, mu: f64, cpdp_clamp: f64) -> Result<Self> {
        let w = Self {
            alpha_kd,
            alpha_inter,
            mu,
            cpdp_clamp,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha_kd) || !unit.contains(&self.alpha_inter) {
            return Err(LossError::Weights(format!(
                "alpha_kd={} alpha_inter={} must lie in [0, 1]",
                self.alpha_kd, self.alpha_inter
            )));
        }
        if self.alpha_kd + self.alpha_inter > 1.0 {
            return Err(LossError::Weights(format!(
                "alpha_kd + alpha_inter = {} exceeds 1",
                self.alpha_kd + self.alpha_inter
            )));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(LossError::Weights(format!("mu={} must be >= 0", self.mu)));
        }
        if !(self.cpdp_clamp.is_finite() && self.cpdp_clamp > 0.0) {
            return Err(LossError::Weights(format!(
                "cpdp_clamp={} must be > 0",
                self.cpdp_clamp
            )));
        }
        Ok(())
    }

    pub fn alpha_hard(&self) -> f64 {
        1.0 - self.alpha_kd - self.alpha_inter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveTauConfig {
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
}

fn default_tau_min() -> f64 {
    0.5
}
fn default_tau_max() -> f64 {
    2.0
}

impl Default for AdaptiveTauConfig {
    fn default() -> Self {
        Self {
            tau_min: default_tau_min(),
            tau_max: default_tau_max(),
        }
    }
}

impl AdaptiveTauConfig {
    pub fn new(tau_min: f64, tau_max: f64) -> Result<Self> {
        let cfg = Self { tau_min, tau_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_min > 0.0 && self.tau_min < self.tau_max && self.tau_max.is_finite() {
            Ok(())
        } else {
            Err(LossError::TauRange {
                tau_min: self.tau_min,
                tau_max: self.tau_max,
            })
        }
    }
}

/// Fixed inter-teacher divergence, computed once before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpdpAnchor {
    delta_star: f64,
}

impl CpdpAnchor {
    pub fn new(delta_star: f64) -> Result<Self> {
        if delta_star.is_finite() {
            Ok(Self { delta_star })
        } else {
            Err(LossError::Anchor(delta_star))
        }
    }

    pub fn delta_star(&self) -> f64 {
        self.delta_star
    }
}

/// Student hidden states, teacher hidden states and the learned projection.
///
/// The projection is stored row-major with shape `d_S × d_T` and maps a
/// student state `h` to `u_j = Σ_i h_i W_ij`.
#[derive(Debug, Clone)]
pub struct HiddenPair {
    pub student_hidden: Vec<Vec<f64>>,
    pub teacher_hidden: Vec<Vec<f64>>,
    pub projection: Vec<f64>,
    pub student_dim: usize,
    pub teacher_dim: usize,
}

impl HiddenPair {
    fn validate(&self) -> Result<()> {
        if self.student_hidden.len() != self.teacher_hidden.len() {
            return Err(LossError::Shape(format!(
                "{} student vs {} teacher hidden positions",
                self.student_hidden.len(),
                self.teacher_hidden.len()
            )));
        }
        if self.projection.len() != self.student_dim * self.teacher_dim {
            return Err(LossError::Shape(format!(
                "projection has {} entries, expected {}x{}",
                self.projection.len(),
                self.student_dim,
                self.teacher_dim
            )));
        }
        let bad_s = self.student_hidden.iter().any(|h| h.len() != self.student_dim);
        let bad_t = self.teacher_hidden.iter().any(|h| h.len() != self.teacher_dim);
        if bad_s || bad_t {
            return Err(LossError::Shape("hidden state dimension mismatch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    /// Per position, per vocabulary entry.
    pub grad: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterGrad {
    pub value: f64,
    pub student_hidden: Vec<Vec<f64>>,
    pub projection: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub kd: f64,
    pub inter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardOutput {
    pub value: f64,
    pub components: LossComponents,
    pub logits_grad: Vec<Vec<f64>>,
    pub hidden_grad: Option<Vec<Vec<f64>>>,
    pub projection_grad: Option<Vec<f64>>,
}

fn scaled(grad: &mut [Vec<f64>], s: f64) {
    for row in grad {
        for g in row {
            *g *= s;
        }
    }
}

/// Masked mean token negative log-likelihood.
pub fn ce_loss(batch: &TokenBatch) -> Result<LossGrad> {
    let m = batch.masked_count()? as f64;
    let v = batch.vocab;
    let mut grad = batch.zero_grad();
    let mut logp = vec![0.0; v];
    let mut total = 0.0;
    for t in 0..batch.len() {
        if !batch.mask[t] {
            continue;
        }
        log_softmax_into(batch.student_logits[t].as_slice(), 1.0, &mut logp);
        let y = batch.gold_ids[t];
        total -= logp[y];
        for (g, &lp) in grad[t].iter_mut().zip(&logp) {
            *g = lp.exp() / m;
        }
        grad[t][y] -= 1.0 / m;
    }
    Ok(LossGrad { value: total / m, grad })
}

/// `τ² · KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`, masked mean, against teacher 1.
pub fn kd_loss(batch: &TokenBatch, tau: Temperature) -> Result<LossGrad> {
    let teacher = batch.teacher1().ok_or(LossError::MissingTeacher(1))?;
    let m = batch.masked_count()? as f64;
    let tau = tau.get();
    let v = batch.vocab;
    let mut grad = batch.zero_grad();
    let mut p_t = vec![0.0; v];
    let mut logp_s = vec![0.0; v];
    let mut total = 0.0;
    for t in 0..batch.len() {
        if !batch.mask[t] {
            continue;
        }
        softmax_into(teacher[t].as_slice(), tau, &mut p_t);
        log_softmax_into(batch.student_logits[t].as_slice(), tau, &mut logp_s);
        total += tau * tau * kl_with_log_q(&p_t, &logp_s);
        // d/dz [τ² KL] = τ (p_S − p_T)
        for ((g, &pt), &lps) in grad[t].iter_mut().zip(&p_t).zip(&logp_s) {
            *g = tau * (lps.exp() - pt) / m;
        }
    }
    Ok(LossGrad { value: total / m, grad })
}

/// Masked mean of `‖normalize(W h_S) − normalize(h_T)‖²`.
pub fn inter_match_loss(h: &HiddenPair, mask: &[bool]) -> Result<InterGrad> {
    h.validate()?;
    if mask.len() != h.student_hidden.len() {
        return Err(LossError::Shape(format!(
            "mask of length {} for {} hidden positions",
            mask.len(),
            h.student_hidden.len()
        )));
    }
    let m = masked_count(mask)? as f64;
    let (ds, dt) = (h.student_dim, h.teacher_dim);
    let mut hidden_grad = vec![vec![0.0; ds]; mask.len()];
    let mut proj_grad = vec![0.0; ds * dt];
    let mut u = vec![0.0; dt];
    let mut total = 0.0;
    for t in 0..mask.len() {
        if !mask[t] {
            continue;
        }
        let hs = &h.student_hidden[t];
        let ht = &h.teacher_hidden[t];
        u.iter_mut().for_each(|x| *x = 0.0);
        for (i, &hi) in hs.iter().enumerate() {
            let row = &h.projection[i * dt..(i + 1) * dt];
            for (uj, &w) in u.iter_mut().zip(row) {
                *uj += hi * w;
            }
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nt = ht.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 {
            return Err(LossError::ZeroNorm {
                which: "projected student",
                position: t,
            });
        }
        if nt == 0.0 {
            return Err(LossError::ZeroNorm {
                which: "teacher",
                position: t,
            });
        }
        let cos: f64 = u.iter().zip(ht).map(|(a, b)| a * b).sum::<f64>() / (nu * nt);
        let mut diff = 0.0;
        for (a, b) in u.iter().zip(ht) {
            let d = a / nu - b / nt;
            diff += d * d;
        }
        total += diff;
        // ∂/∂u ‖û − v̂‖² = −2 (v̂ − cos·û) / ‖u‖
        let gu: Vec<f64> = u
            .iter()
            .zip(ht)
            .map(|(a, b)| -2.0 * (b / nt - cos * a / nu) / nu / m)
            .collect();
        for (i, &hi) in hs.iter().enumerate() {
            let row = &h.projection[i * dt..(i + 1) * dt];
            hidden_grad[t][i] = row.iter().zip(&gu).map(|(w, g)| w * g).sum();
            for (pg, &g) in proj_grad[i * dt..(i + 1) * dt].iter_mut().zip(&gu) {
                *pg += hi * g;
            }
        }
    }
    Ok(InterGrad {
        value: total / m,
        student_hidden: hidden_grad,
        projection: proj_grad,
    })
}

/// `α_hard·CE + α_kd·KD + α_inter·Inter`. Terms with zero weight are not
/// evaluated and report 0 in the components.
pub fn standard_total(
    batch: &TokenBatch,
    hidden: Option<&HiddenPair>,
    weights: &LossWeights,
    tau: Temperature,
) -> Result<StandardOutput> {
    weights.validate()?;
    let mut components = LossComponents::default();
    let ce = ce_loss(batch)?;
    components.ce = ce.value;
    let hard = weights.alpha_hard();
    let mut logits_grad = ce.grad;
    scaled(&mut logits_grad, hard);
    let mut value = hard * ce.value;

    if weights.alpha_kd > 0.0 {
        let kd = kd_loss(batch, tau)?;
        components.kd = kd.value;
        value += weights.alpha_kd * kd.value;
        for (row, krow) in logits_grad.iter_mut().zip(&kd.grad) {
            for (g, k) in row.iter_mut().zip(krow) {
                *g += weights.alpha_kd * k;
            }
        }
    }

    let (mut hidden_grad, mut projection_grad) = (None, None);
    if weights.alpha_inter > 0.0 {
        let h = hidden.ok_or_else(|| LossError::Shape("alpha_inter > 0 requires hidden states".into()))?;
        let mut inter = inter_match_loss(h, &batch.mask)?;
        components.inter = inter.value;
        value += weights.alpha_inter * inter.value;
        scaled(&mut inter.student_hidden, weights.alpha_inter);
        inter.projection.iter_mut().for_each(|g| *g *= weights.alpha_inter);
        hidden_grad = Some(inter.student_hidden);
        projection_grad = Some(inter.projection);
    }

    Ok(StandardOutput {
        value,
        components,
        logits_grad,
        hidden_grad,
        projection_grad,
    })
}

/// Overrides for the gate and the confidence weights, used by the ablation
/// arms. `None` keeps the computed value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EwadRouting {
    pub lambda: Option<f64>,
    pub weights: Option<(f64, f64)>,
}

impl EwadRouting {
    pub const FULL: Self = Self {
        lambda: None,
        weights: None,
    };
    pub const CONFIDENCE_ONLY: Self = Self {
        lambda: Some(1.0),
        weights: None,
    };
    pub const AGREEMENT_ONLY: Self = Self {
        lambda: None,
        weights: Some((0.5, 0.5)),
    };
    pub const FIXED_WEIGHTS: Self = Self {
        lambda: Some(1.0),
        weights: Some((0.5, 0.5)),
    };
}

/// Per-position record of the gated objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    pub position: usize,
    #[serde(flatten)]
    pub reliability: TokenReliability,
    /// Confidence-weighted teacher KL at this position.
    pub kd: f64,
    /// Gold negative log-likelihood at this position.
    pub ce: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cpdp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwadOutput {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
    pub trace: Vec<TokenTrace>,
}

/// Gated blend of confidence-weighted two-teacher KD and gold CE.
///
/// Confidence and agreement use the teachers at unit temperature; the KD
/// terms compare teacher and student at `tau`.
pub fn ewad_loss(
    batch: &TokenBatch,
    rcfg: &ReliabilityConfig,
    tau: Temperature,
    routing: EwadRouting,
) -> Result<EwadOutput> {
    let (t1, t2) = batch.both_teachers()?;
    let m = batch.masked_count()? as f64;
    let tau = tau.get();
    let v = batch.vocab;
    let mut grad = batch.zero_grad();
    let mut trace = Vec::with_capacity(batch.len());
    let (mut p1, mut p2) = (vec![0.0; v], vec![0.0; v]);
    let (mut logp_s_tau, mut logp_s) = (vec![0.0; v], vec![0.0; v]);
    let mut total = 0.0;
    for t in 0..batch.len() {
        if !batch.mask[t] {
            continue;
        }
        let mut rel = token_reliability(&t1[t].dist(1.0), &t2[t].dist(1.0), rcfg)?;
        if let Some((w1, w2)) = routing.weights {
            rel.w1 = w1;
            rel.w2 = w2;
        }
        if let Some(lambda) = routing.lambda {
            rel.lambda = lambda;
        }
        softmax_into(t1[t].as_slice(), tau, &mut p1);
        softmax_into(t2[t].as_slice(), tau, &mut p2);
        let z = batch.student_logits[t].as_slice();
        log_softmax_into(z, tau, &mut logp_s_tau);
        log_softmax_into(z, 1.0, &mut logp_s);
        let y = batch.gold_ids[t];
        let kd = rel.w1 * kl_with_log_q(&p1, &logp_s_tau) + rel.w2 * kl_with_log_q(&p2, &logp_s_tau);
        let ce = -logp_s[y];
        let lam = rel.lambda;
        total += lam * kd + (1.0 - lam) * ce;
        for k in 0..v {
            let kd_g = (rel.w1 * (logp_s_tau[k].exp() - p1[k]) + rel.w2 * (logp_s_tau[k].exp() - p2[k])) / tau;
            let ce_g = logp_s[k].exp() - if k == y { 1.0 } else { 0.0 };
            grad[t][k] = (lam * kd_g + (1.0 - lam) * ce_g) / m;
        }
        trace.push(TokenTrace {
            position: t,
            reliability: rel,
            kd,
            ce,
            cpdp: None,
        });
    }
    Ok(EwadOutput {
        value: total / m,
        grad,
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpdpToken {
    pub position: usize,
    /// Per-token penalty after clamping.
    pub value: f64,
    pub clamped: bool,
    /// Student entropy was below [`ENTROPY_FLOOR`] and was floored.
    pub entropy_floored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpdpOutput {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
    pub tokens: Vec<CpdpToken>,
}

/// Divergence-preservation penalty
/// `((KL(p_T1‖p_S) − KL(p_T2‖p_S)) / H(p_S) − Δ*)²`, clamped per token and
/// averaged over the mask. `H(p_S)` is a constant in the gradient.
pub fn cpdp_loss(batch: &TokenBatch, anchor: &CpdpAnchor, clamp: f64) -> Result<CpdpOutput> {
    let (t1, t2) = batch.both_teachers()?;
    let m = batch.masked_count()? as f64;
    let v = batch.vocab;
    let mut grad = batch.zero_grad();
    let mut tokens = Vec::with_capacity(batch.len());
    let (mut p1, mut p2) = (vec![0.0; v], vec![0.0; v]);
    let mut logp_s = vec![0.0; v];
    let mut total = 0.0;
    for t in 0..batch.len() {
        if !batch.mask[t] {
            continue;
        }
        softmax_into(t1[t].as_slice(), 1.0, &mut p1);
        softmax_into(t2[t].as_slice(), 1.0, &mut p2);
        log_softmax_into(batch.student_logits[t].as_slice(), 1.0, &mut logp_s);
        let p_s: Vec<f64> = logp_s.iter().map(|l| l.exp()).collect();
        let raw_h = entropy_slice(&p_s);
        let entropy_floored = raw_h < ENTROPY_FLOOR;
        let h = raw_h.max(ENTROPY_FLOOR);
        let gap = (kl_with_log_q(&p1, &logp_s) - kl_with_log_q(&p2, &logp_s)) / h - anchor.delta_star;
        let raw = gap * gap;
        let clamped = raw > clamp;
        let value = if clamped { clamp } else { raw };
        total += value;
        if !clamped {
            // ∂/∂z (KL1 − KL2) = p_T2 − p_T1
            let s = 2.0 * gap / h / m;
            for ((g, a), b) in grad[t].iter_mut().zip(&p1).zip(&p2) {
                *g = s * (b - a);
            }
        }
        tokens.push(CpdpToken {
            position: t,
            value,
            clamped,
            entropy_floored,
        });
    }
    Ok(CpdpOutput {
        value: total / m,
        grad,
        tokens,
    })
}

/// `Δ*` = mean over calibration tokens of `KL(p_T1 ‖ p_T2)`.
pub fn compute_anchor(teacher1: &[ProbDist], teacher2: &[ProbDist]) -> Result<CpdpAnchor> {
    if teacher1.len() != teacher2.len() {
        return Err(LossError::Shape(format!(
            "{} vs {} calibration tokens",
            teacher1.len(),
            teacher2.len()
        )));
    }
    if teacher1.is_empty() {
        return Err(LossError::EmptyCalibration);
    }
    let mut total = 0.0;
    for (p, q) in teacher1.iter().zip(teacher2) {
        total += kl(p, q)?;
    }
    CpdpAnchor::new(total / teacher1.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedOutput {
    pub value: f64,
    pub ewad: f64,
    pub cpdp: f64,
    pub grad: Vec<Vec<f64>>,
    pub trace: Vec<TokenTrace>,
    pub cpdp_tokens: Vec<CpdpToken>,
}

/// `EWAD + μ · CPDP`.
pub fn combined_total(
    batch: &TokenBatch,
    rcfg: &ReliabilityConfig,
    anchor: &CpdpAnchor,
    weights: &LossWeights,
    tau: Temperature,
    routing: EwadRouting,
) -> Result<CombinedOutput> {
    weights.validate()?;
    let ewad = ewad_loss(batch, rcfg, tau, routing)?;
    let cpdp = cpdp_loss(batch, anchor, weights.cpdp_clamp)?;
    let mut grad = ewad.grad;
    for (row, crow) in grad.iter_mut().zip(&cpdp.grad) {
        for (g, c) in row.iter_mut().zip(crow) {
            *g += weights.mu * c;
        }
    }
    let mut trace = ewad.trace;
    for (rec, tok) in trace.iter_mut().zip(&cpdp.tokens) {
        debug_assert_eq!(rec.position, tok.position);
        rec.cpdp = Some(tok.value);
    }
    Ok(CombinedOutput {
        value: ewad.value + weights.mu * cpdp.value,
        ewad: ewad.value,
        cpdp: cpdp.value,
        grad,
        trace,
        cpdp_tokens: cpdp.tokens,
    })
}

/// Masked mean teacher entropy `H̄` of one sample.
pub fn mean_teacher_entropy(teacher: &[ProbDist], mask: &[bool]) -> Result<f64> {
    if teacher.len() != mask.len() {
        return Err(LossError::Shape(format!(
            "{} teacher positions, mask of length {}",
            teacher.len(),
            mask.len()
        )));
    }
    let m = masked_count(mask)? as f64;
    let total: f64 = teacher
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(p, _)| entropy_slice(p.as_slice()))
        .sum();
    Ok(total / m)
}

/// Per-sample temperature `τ_min + (τ_max − τ_min)·σ(H̄ − H̄_batch)`.
pub fn adaptive_tau(
    teacher: &[ProbDist],
    mask: &[bool],
    batch_mean_entropy: f64,
    cfg: &AdaptiveTauConfig,
) -> Result<Temperature> {
    cfg.validate()?;
    let h = mean_teacher_entropy(teacher, mask)?;
    Ok(tau_from_entropy(h, batch_mean_entropy, cfg))
}

pub fn tau_from_entropy(sample_entropy: f64, batch_mean_entropy: f64, cfg: &AdaptiveTauConfig) -> Temperature {
    let s = sigmoid(sample_entropy - batch_mean_entropy);
    Temperature::new(cfg.tau_min + (cfg.tau_max - cfg.tau_min) * s)
        .expect("tau_min > 0 keeps the interpolation positive")
}

/// Temperatures for a batch given each sample's mean teacher entropy; the
/// batch reference is the mean of the per-sample values.
pub fn batch_adaptive_taus(sample_entropies: &[f64], cfg: &AdaptiveTauConfig) -> Result<Vec<Temperature>> {
    cfg.validate()?;
    if sample_entropies.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let mean = sample_entropies.iter().sum::<f64>() / sample_entropies.len() as f64;
    Ok(sample_entropies
        .iter()
        .map(|&h| tau_from_entropy(h, mean, cfg))
        .collect())
}
