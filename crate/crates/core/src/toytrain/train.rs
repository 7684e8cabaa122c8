use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Example};
use super::generate::{generate, GenerateConfig};
use super::model::ToyModel;
use super::{derive_seed, ToyError, EOS};
use crate::distmath::{LogitVector, ProbDist, Temperature};
use crate::evalmetrics::rouge_l;
use crate::losses::{
    batch_adaptive_taus, ce_loss, combined_total, compute_anchor, ewad_loss, mean_teacher_entropy, standard_total,
    AdaptiveTauConfig, CpdpAnchor, EwadRouting, HiddenPair, LossWeights, TeacherScores, TokenBatch, TokenTrace,
};
use crate::reliability::ReliabilityConfig;
use crate::teachercache::{
    densify, sample_target, CacheFile, MixingConfig, PseudoLabelRecord, TargetSource, TopKRecord,
};

pub const CHECKPOINT_VERSION: u32 = 1;

type Result<T> = std::result::Result<T, ToyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "CE")]
    Ce,
    A2,
    A3,
    A4,
    A5,
    #[serde(rename = "EWAD")]
    Ewad,
    #[serde(rename = "EWAD_CPDP")]
    EwadCpdp,
}

impl LossMode {
    pub fn uses_pseudo(self) -> bool {
        matches!(self, LossMode::A3 | LossMode::A4 | LossMode::A5)
    }
    pub fn adaptive_tau(self) -> bool {
        matches!(self, LossMode::A4 | LossMode::A5)
    }
    pub fn uses_inter(self) -> bool {
        self == LossMode::A5
    }
    pub fn needs_teacher1(self) -> bool {
        self != LossMode::Ce
    }
    pub fn needs_teacher2(self) -> bool {
        matches!(self, LossMode::Ewad | LossMode::EwadCpdp)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingArm {
    #[default]
    Full,
    ConfidenceOnly,
    AgreementOnly,
    FixedWeights,
}

impl RoutingArm {
    pub fn routing(self) -> EwadRouting {
        match self {
            RoutingArm::Full => EwadRouting::FULL,
            RoutingArm::ConfidenceOnly => EwadRouting::CONFIDENCE_ONLY,
            RoutingArm::AgreementOnly => EwadRouting::AGREEMENT_ONLY,
            RoutingArm::FixedWeights => EwadRouting::FIXED_WEIGHTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    #[serde(default)]
    pub routing: RoutingArm,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub reliability: ReliabilityConfig,
    #[serde(default)]
    pub adaptive_tau: AdaptiveTauConfig,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_context")]
    pub context_limit: usize,
    #[serde(default = "d_hidden")]
    pub hidden_dim: usize,
    /// Fixed distillation temperature for A2 and A3.
    #[serde(default = "d_kd_tau")]
    pub kd_temperature: f64,
    #[serde(default = "d_ewad_tau")]
    pub ewad_temperature: f64,
    /// Target tokens used to calibrate the CPDP anchor.
    #[serde(default = "d_calib")]
    pub calibration_tokens: usize,
    #[serde(default = "d_max_len")]
    pub max_summary_len: usize,
}

fn d_lr() -> f64 {
    0.05
}
fn d_epochs() -> usize {
    40
}
fn d_batch() -> usize {
    16
}
fn d_context() -> usize {
    64
}
fn d_hidden() -> usize {
    16
}
fn d_kd_tau() -> f64 {
    0.8
}
fn d_ewad_tau() -> f64 {
    1.0
}
fn d_calib() -> usize {
    512
}
fn d_max_len() -> usize {
    16
}

impl TrainConfig {
    /// Paper constants for the given mode.
    pub fn preset(loss_mode: LossMode) -> Self {
        let mut weights = LossWeights::default();
        if loss_mode.uses_inter() {
            weights.alpha_inter = 0.1;
        }
        let mixing = MixingConfig {
            p_pseudo: if loss_mode.uses_pseudo() { 0.3 } else { 0.0 },
            ..Default::default()
        };
        Self {
            loss_mode,
            routing: RoutingArm::Full,
            weights,
            reliability: ReliabilityConfig::default(),
            adaptive_tau: AdaptiveTauConfig::default(),
            mixing,
            learning_rate: d_lr(),
            epochs: d_epochs(),
            batch_size: d_batch(),
            seed: 0,
            context_limit: d_context(),
            hidden_dim: d_hidden(),
            kd_temperature: d_kd_tau(),
            ewad_temperature: d_ewad_tau(),
            calibration_tokens: d_calib(),
            max_summary_len: d_max_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ToyError::Config(m));
        self.weights.validate()?;
        self.adaptive_tau.validate()?;
        self.mixing.validate()?;
        self.reliability
            .validate()
            .map_err(|e| ToyError::Config(e.to_string()))?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.context_limit == 0 {
            return bad("batch_size, hidden_dim and context_limit must be at least 1".into());
        }
        Temperature::new(self.kd_temperature).map_err(|e| ToyError::Config(e.to_string()))?;
        Temperature::new(self.ewad_temperature).map_err(|e| ToyError::Config(e.to_string()))?;
        if self.loss_mode.uses_inter() && self.weights.alpha_inter <= 0.0 {
            return bad("A5 requires alpha_inter > 0".into());
        }
        if !self.loss_mode.uses_inter() && self.weights.alpha_inter > 0.0 {
            return bad(format!("alpha_inter > 0 is only used by A5, not {:?}", self.loss_mode));
        }
        if self.loss_mode == LossMode::EwadCpdp && self.calibration_tokens == 0 {
            return bad("calibration_tokens must be at least 1".into());
        }
        Ok(())
    }

    fn objective(&self, tau: Temperature, anchor: Option<CpdpAnchor>) -> Objective {
        let routing = self.routing.routing();
        match self.loss_mode {
            LossMode::Ce => Objective::Ce,
            LossMode::A2 | LossMode::A3 | LossMode::A4 | LossMode::A5 => Objective::Standard {
                weights: self.weights,
                tau,
            },
            LossMode::Ewad => Objective::Ewad {
                reliability: self.reliability,
                routing,
                tau,
            },
            LossMode::EwadCpdp => Objective::Combined {
                reliability: self.reliability,
                routing,
                anchor: anchor.expect("anchor calibrated before training"),
                weights: self.weights,
                tau,
            },
        }
    }
}

/// Cached top-k teacher records keyed by example (or pseudo-target) id.
#[derive(Debug, Clone, Default)]
pub struct TopKIndex {
    pub vocab_size: usize,
    pub records: BTreeMap<String, TopKRecord>,
}

impl TopKIndex {
    pub fn from_cache(cache: CacheFile) -> Result<Self> {
        match cache {
            CacheFile::TopK {
                vocab_size, records, ..
            } => Ok(Self {
                vocab_size,
                records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
            }),
            CacheFile::Pseudo { .. } => Err(ToyError::Config("expected a top-k cache, found pseudo-labels".into())),
        }
    }
}

/// One teacher: an online model, a top-k cache, or both (cache wins).
#[derive(Debug, Clone, Default)]
pub struct TeacherSource {
    pub name: String,
    pub model: Option<ToyModel>,
    pub topk: Option<TopKIndex>,
}

impl TeacherSource {
    pub fn from_model(name: impl Into<String>, model: ToyModel) -> Self {
        Self {
            name: name.into(),
            model: Some(model),
            topk: None,
        }
    }

    pub fn from_cache(name: impl Into<String>, topk: TopKIndex) -> Self {
        Self {
            name: name.into(),
            model: None,
            topk: Some(topk),
        }
    }

    pub fn scores(&self, key: &str, document: &[u32], target: &[u32]) -> Result<Vec<TeacherScores>> {
        if let Some(rec) = self
            .topk
            .as_ref()
            .and_then(|c| c.records.get(key).map(|r| (c.vocab_size, r)))
        {
            let (vocab, rec) = rec;
            if rec.positions.len() != target.len() {
                return Err(ToyError::Shape(format!(
                    "cache record {key} has {} positions, target has {}",
                    rec.positions.len(),
                    target.len()
                )));
            }
            return (0..target.len())
                .map(|t| Ok(TeacherScores::from_dist(&densify(rec, t, vocab)?)))
                .collect();
        }
        match &self.model {
            Some(m) => Ok(m
                .forward(document, target)?
                .logits
                .iter()
                .map(TeacherScores::from_logits)
                .collect()),
            None => Err(ToyError::MissingSupervision(format!("{key} (teacher {})", self.name))),
        }
    }

    fn hidden(&self, document: &[u32], target: &[u32]) -> Result<Vec<Vec<f64>>> {
        let m = self
            .model
            .as_ref()
            .ok_or_else(|| ToyError::Config(format!("teacher {} has no model for hidden states", self.name)))?;
        Ok(m.forward(document, target)?.target_hidden().to_vec())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Supervision {
    pub teacher1: Option<TeacherSource>,
    pub teacher2: Option<TeacherSource>,
    /// Pseudo-labels grouped by example id.
    pub pseudo: BTreeMap<String, Vec<PseudoLabelRecord>>,
}

impl Supervision {
    pub fn add_pseudo(&mut self, records: impl IntoIterator<Item = PseudoLabelRecord>) {
        for r in records {
            self.pseudo.entry(r.id.clone()).or_default().push(r);
        }
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        let mode = cfg.loss_mode;
        if mode.needs_teacher1() && self.teacher1.is_none() {
            return Err(ToyError::Config(format!("{mode:?} needs teacher 1")));
        }
        if mode.needs_teacher2() && self.teacher2.is_none() {
            return Err(ToyError::Config(format!("{mode:?} needs two teachers")));
        }
        if mode.uses_inter() && self.teacher1.as_ref().and_then(|t| t.model.as_ref()).is_none() {
            return Err(ToyError::Config(
                "A5 needs an online teacher model for hidden states".into(),
            ));
        }
        if mode.uses_pseudo() && cfg.mixing.p_pseudo > 0.0 && self.pseudo.is_empty() {
            return Err(ToyError::Config(format!("{mode:?} needs pseudo-labels")));
        }
        Ok(())
    }
}

/// Trainable state of a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentParams {
    pub model: ToyModel,
    /// `d_S × d_T` projection into teacher hidden space.
    pub projection: Option<Vec<f64>>,
    pub teacher_dim: usize,
}

pub type StudentGrads = StudentParams;

impl StudentParams {
    pub fn new(model: ToyModel) -> Self {
        Self {
            model,
            projection: None,
            teacher_dim: 0,
        }
    }

    pub fn with_projection(mut self, teacher_dim: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (self.model.hidden_dim as f64).sqrt();
        self.projection = Some(
            (0..self.model.hidden_dim * teacher_dim)
                .map(|_| rng.gen_range(-s..s))
                .collect(),
        );
        self.teacher_dim = teacher_dim;
        self
    }

    fn zeros_like(&self) -> Self {
        Self {
            model: ToyModel::zeros(self.model.vocab_size, self.model.hidden_dim),
            projection: self.projection.as_ref().map(|p| vec![0.0; p.len()]),
            teacher_dim: self.teacher_dim,
        }
    }

    pub fn add_scaled(&mut self, other: &StudentParams, scale: f64) {
        self.model.add_scaled(&other.model, scale);
        if let (Some(a), Some(b)) = (self.projection.as_mut(), other.projection.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// All parameters, projection last.
    pub fn flat(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.model.params().copied().collect();
        if let Some(p) = &self.projection {
            v.extend_from_slice(p);
        }
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut f64> {
        let mut v: Vec<&mut f64> = self.model.params_mut().collect();
        if let Some(p) = &mut self.projection {
            v.extend(p.iter_mut());
        }
        v
    }
}

/// Teacher inputs for one example, aligned with its target.
#[derive(Debug, Clone, Default)]
pub struct TeacherSignals {
    pub teacher1: Option<Vec<TeacherScores>>,
    pub teacher2: Option<Vec<TeacherScores>>,
    pub teacher_hidden: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Ce,
    Standard {
        weights: LossWeights,
        tau: Temperature,
    },
    Ewad {
        reliability: ReliabilityConfig,
        routing: EwadRouting,
        tau: Temperature,
    },
    Combined {
        reliability: ReliabilityConfig,
        routing: EwadRouting,
        anchor: CpdpAnchor,
        weights: LossWeights,
        tau: Temperature,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleLoss {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub inter: f64,
    pub ewad: f64,
    pub cpdp: f64,
}

impl ExampleLoss {
    fn accumulate(&mut self, o: &ExampleLoss) {
        self.total += o.total;
        self.ce += o.ce;
        self.kd += o.kd;
        self.inter += o.inter;
        self.ewad += o.ewad;
        self.cpdp += o.cpdp;
    }

    fn scale(&mut self, s: f64) {
        for x in [
            &mut self.total,
            &mut self.ce,
            &mut self.kd,
            &mut self.inter,
            &mut self.ewad,
            &mut self.cpdp,
        ] {
            *x *= s;
        }
    }
}

fn token_batch(target: &[u32], logits: Vec<LogitVector>, signals: &TeacherSignals) -> Result<TokenBatch> {
    let gold = target.iter().map(|&t| t as usize).collect();
    let mut batch = TokenBatch::new(gold, vec![true; target.len()], logits)?;
    if let Some(t1) = &signals.teacher1 {
        batch = batch.with_teacher1(t1.clone())?;
    }
    if let Some(t2) = &signals.teacher2 {
        batch = batch.with_teacher2(t2.clone())?;
    }
    Ok(batch)
}

/// Loss value and gradients for every student parameter on one example.
pub fn backward(
    params: &StudentParams,
    document: &[u32],
    target: &[u32],
    signals: &TeacherSignals,
    objective: &Objective,
) -> Result<(ExampleLoss, StudentGrads)> {
    let pass = params.model.forward(document, target)?;
    let batch = token_batch(target, pass.logits.clone(), signals)?;
    let mut loss = ExampleLoss::default();
    let mut grads = params.zeros_like();
    let mean =
        |trace: &[TokenTrace], f: fn(&TokenTrace) -> f64| trace.iter().map(f).sum::<f64>() / trace.len().max(1) as f64;
    let (logit_grad, hidden_grad) = match objective {
        Objective::Ce => {
            let o = ce_loss(&batch)?;
            loss.ce = o.value;
            loss.total = o.value;
            (o.grad, None)
        }
        Objective::Standard { weights, tau } => {
            let pair = if weights.alpha_inter > 0.0 {
                let teacher_hidden = signals
                    .teacher_hidden
                    .clone()
                    .ok_or_else(|| ToyError::Config("inter-matching needs teacher hidden states".into()))?;
                let projection = params
                    .projection
                    .clone()
                    .ok_or_else(|| ToyError::Config("inter-matching needs a projection".into()))?;
                Some(HiddenPair {
                    student_hidden: pass.target_hidden().to_vec(),
                    teacher_hidden,
                    projection,
                    student_dim: params.model.hidden_dim,
                    teacher_dim: params.teacher_dim,
                })
            } else {
                None
            };
            let o = standard_total(&batch, pair.as_ref(), weights, *tau)?;
            loss.total = o.value;
            loss.ce = o.components.ce;
            loss.kd = o.components.kd;
            loss.inter = o.components.inter;
            if let (Some(pg), Some(g)) = (o.projection_grad, grads.projection.as_mut()) {
                *g = pg;
            }
            (o.logits_grad, o.hidden_grad)
        }
        Objective::Ewad {
            reliability,
            routing,
            tau,
        } => {
            let o = ewad_loss(&batch, reliability, *tau, *routing)?;
            loss.total = o.value;
            loss.ewad = o.value;
            loss.kd = mean(&o.trace, |t| t.kd);
            loss.ce = mean(&o.trace, |t| t.ce);
            (o.grad, None)
        }
        Objective::Combined {
            reliability,
            routing,
            anchor,
            weights,
            tau,
        } => {
            let o = combined_total(&batch, reliability, anchor, weights, *tau, *routing)?;
            loss.total = o.value;
            loss.ewad = o.ewad;
            loss.cpdp = o.cpdp;
            loss.kd = mean(&o.trace, |t| t.kd);
            loss.ce = mean(&o.trace, |t| t.ce);
            (o.grad, None)
        }
    };
    grads.model = params.model.backward(&pass, &logit_grad, hidden_grad.as_deref());
    Ok((loss, grads))
}

/// Per-token record for one example, tagged with its id and target token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    pub token: u32,
    #[serde(flatten)]
    pub trace: TokenTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kd: f64,
    pub inter: f64,
    pub ewad: f64,
    pub cpdp: f64,
    /// Mean distillation temperature used this epoch.
    pub mean_tau: f64,
    pub pseudo_fraction: f64,
    pub val_rouge_l: Option<f64>,
    pub entropy_running_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: StudentParams,
    /// Running mean of batch teacher entropy seen during training.
    pub entropy_running_mean: Option<f64>,
    pub cpdp_anchor: Option<f64>,
}

impl Checkpoint {
    pub fn from_params(params: StudentParams) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            params,
            entropy_running_mean: None,
            cpdp_anchor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(ToyError::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.params.model.validate()?;
        if let Some(p) = &self.params.projection {
            if p.len() != self.params.model.hidden_dim * self.params.teacher_dim {
                return Err(ToyError::Shape("projection size mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToyError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| ToyError::Config(format!("malformed checkpoint {}: {e}", path.display())))?;
        ck.validate()?;
        Ok(ck)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: StudentParams,
    pub metrics: Vec<EpochMetrics>,
    pub entropy_running_mean: Option<f64>,
    pub anchor: Option<CpdpAnchor>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params: self.params.clone(),
            entropy_running_mean: self.entropy_running_mean,
            cpdp_anchor: self.anchor.map(|a| a.delta_star()),
        }
    }
}

fn with_eos(tokens: &[u32]) -> Vec<u32> {
    let mut t = tokens.to_vec();
    t.push(EOS);
    t
}

fn dists(scores: &[TeacherScores]) -> Vec<ProbDist> {
    scores.iter().map(|s| s.dist(1.0)).collect()
}

/// Inter-teacher divergence over the first `tokens` gold target positions.
pub fn calibrate_anchor(examples: &[Example], sup: &Supervision, tokens: usize) -> Result<CpdpAnchor> {
    let (t1, t2) = match (&sup.teacher1, &sup.teacher2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(ToyError::Config("anchor calibration needs two teachers".into())),
    };
    let (mut p1, mut p2) = (Vec::new(), Vec::new());
    for ex in examples {
        if p1.len() >= tokens {
            break;
        }
        let target = with_eos(&ex.summary);
        p1.extend(dists(&t1.scores(&ex.id, &ex.document, &target)?));
        p2.extend(dists(&t2.scores(&ex.id, &ex.document, &target)?));
    }
    p1.truncate(tokens);
    p2.truncate(tokens);
    Ok(compute_anchor(&p1, &p2)?)
}

struct Prepared {
    target: Vec<u32>,
    pseudo: bool,
    signals: TeacherSignals,
    entropy: Option<f64>,
}

fn prepare(ex: &Example, index: u64, cfg: &TrainConfig, sup: &Supervision) -> Result<Prepared> {
    let mode = cfg.loss_mode;
    let (summary, source) = if mode.uses_pseudo() {
        let pool: Vec<&PseudoLabelRecord> = sup.pseudo.get(&ex.id).map(|v| v.iter().collect()).unwrap_or_default();
        if pool.is_empty() {
            // Teachers may emit nothing for an example; gold is the only target then.
            (ex.summary.clone(), TargetSource::Gold)
        } else {
            sample_target(&ex.summary, &pool, &cfg.mixing, index)?
        }
    } else {
        (ex.summary.clone(), TargetSource::Gold)
    };
    let key = match &source {
        TargetSource::Gold => ex.id.clone(),
        TargetSource::Pseudo(teacher) => format!("{}#{teacher}", ex.id),
    };
    let target = with_eos(&summary);
    let mut signals = TeacherSignals::default();
    if mode.needs_teacher1() {
        let t1 = sup.teacher1.as_ref().expect("checked");
        signals.teacher1 = Some(t1.scores(&key, &ex.document, &target)?);
        if mode.uses_inter() {
            signals.teacher_hidden = Some(t1.hidden(&ex.document, &target)?);
        }
    }
    if mode.needs_teacher2() {
        let t2 = sup.teacher2.as_ref().expect("checked");
        signals.teacher2 = Some(t2.scores(&key, &ex.document, &target)?);
    }
    let entropy = match (&signals.teacher1, mode.adaptive_tau()) {
        (Some(t1), true) => Some(mean_teacher_entropy(&dists(t1), &vec![true; target.len()])?),
        _ => None,
    };
    Ok(Prepared {
        target,
        pseudo: matches!(source, TargetSource::Pseudo(_)),
        signals,
        entropy,
    })
}

/// Mean ROUGE-L of greedy summaries against references.
pub(crate) fn mean_rouge_l(model: &ToyModel, examples: &[Example], max_len: usize) -> Option<f64> {
    if examples.is_empty() {
        return None;
    }
    let gen = GenerateConfig {
        max_len,
        ..Default::default()
    };
    let scores: Vec<f64> = examples
        .par_iter()
        .map(|e| rouge_l(&generate(model, &e.document, &gen), &e.summary))
        .collect();
    Some(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Plain mini-batch gradient descent over the training split.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, sup: &Supervision) -> Result<TrainOutcome> {
    cfg.validate()?;
    sup.check(cfg)?;
    let mode = cfg.loss_mode;
    let mut params = StudentParams::new(ToyModel::init(
        corpus.vocab_size,
        cfg.hidden_dim,
        derive_seed(cfg.seed, "init"),
    ));
    if mode.uses_inter() {
        let td = sup
            .teacher1
            .as_ref()
            .and_then(|t| t.model.as_ref())
            .expect("checked")
            .hidden_dim;
        params = params.with_projection(td, derive_seed(cfg.seed, "projection"));
    }
    let anchor = if mode == LossMode::EwadCpdp {
        Some(calibrate_anchor(&corpus.train, sup, cfg.calibration_tokens)?)
    } else {
        None
    };
    let fixed_tau = match mode {
        LossMode::Ewad | LossMode::EwadCpdp => Temperature::new(cfg.ewad_temperature),
        _ => Temperature::new(cfg.kd_temperature),
    }
    .map_err(|e| ToyError::Config(e.to_string()))?;

    let n = corpus.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let (mut running_sum, mut running_count) = (0.0, 0usize);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = ExampleLoss::default();
        let (mut tau_sum, mut pseudo_count) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let prepared: Vec<Prepared> = batch
                .par_iter()
                .map(|&i| prepare(&corpus.train[i], (epoch * n + i) as u64, cfg, sup))
                .collect::<Result<_>>()?;
            let taus = if mode.adaptive_tau() {
                let hs: Vec<f64> = prepared.iter().map(|p| p.entropy.expect("adaptive mode")).collect();
                running_sum += hs.iter().sum::<f64>() / hs.len() as f64;
                running_count += 1;
                batch_adaptive_taus(&hs, &cfg.adaptive_tau)?
            } else {
                vec![fixed_tau; prepared.len()]
            };
            let results: Vec<(ExampleLoss, StudentGrads)> = batch
                .par_iter()
                .zip(prepared.par_iter().zip(taus.par_iter()))
                .map(|(&i, (p, &tau))| {
                    backward(
                        &params,
                        &corpus.train[i].document,
                        &p.target,
                        &p.signals,
                        &cfg.objective(tau, anchor),
                    )
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    ToyError::NonFinite => ToyError::Diverged {
                        epoch: epoch + 1,
                        batch: b,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
            let mut g = params.zeros_like();
            let mut batch_loss = ExampleLoss::default();
            for (l, eg) in &results {
                batch_loss.accumulate(l);
                g.add_scaled(eg, 1.0);
            }
            if !batch_loss.total.is_finite() || g.flat().iter().any(|x| !x.is_finite()) {
                return Err(ToyError::Diverged {
                    epoch: epoch + 1,
                    batch: b,
                    loss: batch_loss.total,
                });
            }
            params.add_scaled(&g, -cfg.learning_rate / results.len() as f64);
            epoch_loss.accumulate(&batch_loss);
            tau_sum += taus.iter().map(|t| t.get()).sum::<f64>();
            pseudo_count += prepared.iter().filter(|p| p.pseudo).count();
        }
        let denom = n.max(1) as f64;
        epoch_loss.scale(1.0 / denom);
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss: epoch_loss.total,
            ce: epoch_loss.ce,
            kd: epoch_loss.kd,
            inter: epoch_loss.inter,
            ewad: epoch_loss.ewad,
            cpdp: epoch_loss.cpdp,
            mean_tau: if mode == LossMode::Ce { 0.0 } else { tau_sum / denom },
            pseudo_fraction: pseudo_count as f64 / denom,
            val_rouge_l: mean_rouge_l(&params.model, &corpus.val, cfg.max_summary_len),
            entropy_running_mean: (running_count > 0).then(|| running_sum / running_count as f64),
        });
    }
    Ok(TrainOutcome {
        params,
        metrics,
        entropy_running_mean: (running_count > 0).then(|| running_sum / running_count as f64),
        anchor,
    })
}

/// Per-token gate records for the named examples, on gold targets.
pub fn gate_trace(
    student: &StudentParams,
    corpus: &Corpus,
    ids: &[String],
    sup: &Supervision,
    cfg: &TrainConfig,
    anchor: Option<CpdpAnchor>,
) -> Result<Vec<TraceRecord>> {
    let (t1, t2) = match (&sup.teacher1, &sup.teacher2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(ToyError::Config("gate tracing needs two teachers".into())),
    };
    let tau = Temperature::new(cfg.ewad_temperature).map_err(|e| ToyError::Config(e.to_string()))?;
    let routing = cfg.routing.routing();
    let mut out = Vec::new();
    for id in ids {
        let ex = corpus.find(id).ok_or_else(|| ToyError::UnknownExample(id.clone()))?;
        let target = with_eos(&ex.summary);
        let signals = TeacherSignals {
            teacher1: Some(t1.scores(&ex.id, &ex.document, &target)?),
            teacher2: Some(t2.scores(&ex.id, &ex.document, &target)?),
            teacher_hidden: None,
        };
        let pass = student.model.forward(&ex.document, &target)?;
        let batch = token_batch(&target, pass.logits, &signals)?;
        let trace = match anchor {
            Some(a) => combined_total(&batch, &cfg.reliability, &a, &cfg.weights, tau, routing)?.trace,
            None => ewad_loss(&batch, &cfg.reliability, tau, routing)?.trace,
        };
        out.extend(trace.into_iter().map(|t| TraceRecord {
            id: ex.id.clone(),
            token: target[t.position],
            trace: t,
        }));
    }
    Ok(out)
}
