//! Versioned TOML experiment description.

use serde::{Deserialize, Serialize};

use crate::longdoc::ChunkConfig;
use crate::toytrain::{derive_seed, CorpusConfig, LossMode, RoutingArm, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "A1", alias = "CE")]
    A1,
    A2,
    A3,
    A4,
    A5,
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "single_t1")]
    SingleT1,
    #[serde(rename = "single_t2")]
    SingleT2,
    #[serde(rename = "fixed_weights")]
    FixedWeights,
    #[serde(rename = "confidence_only")]
    ConfidenceOnly,
    #[serde(rename = "agreement_only")]
    AgreementOnly,
    #[serde(rename = "ewad", alias = "EWAD")]
    Ewad,
    #[serde(rename = "ewad_cpdp", alias = "EWAD_CPDP")]
    EwadCpdp,
}

impl Preset {
    pub const ALL: [Preset; 13] = [
        Preset::A1,
        Preset::A2,
        Preset::A3,
        Preset::A4,
        Preset::A5,
        Preset::Baseline,
        Preset::SingleT1,
        Preset::SingleT2,
        Preset::FixedWeights,
        Preset::ConfidenceOnly,
        Preset::AgreementOnly,
        Preset::Ewad,
        Preset::EwadCpdp,
    ];

    pub fn loss_mode(self) -> LossMode {
        match self {
            Preset::A1 | Preset::Baseline => LossMode::Ce,
            Preset::A2 | Preset::SingleT1 | Preset::SingleT2 => LossMode::A2,
            Preset::A3 => LossMode::A3,
            Preset::A4 => LossMode::A4,
            Preset::A5 => LossMode::A5,
            Preset::FixedWeights | Preset::ConfidenceOnly | Preset::AgreementOnly | Preset::Ewad => LossMode::Ewad,
            Preset::EwadCpdp => LossMode::EwadCpdp,
        }
    }

    pub fn routing(self) -> RoutingArm {
        match self {
            Preset::FixedWeights => RoutingArm::FixedWeights,
            Preset::ConfidenceOnly => RoutingArm::ConfidenceOnly,
            Preset::AgreementOnly => RoutingArm::AgreementOnly,
            _ => RoutingArm::Full,
        }
    }

    /// Which teacher supplies the single-teacher KD signal.
    pub fn kd_teacher(self) -> usize {
        if self == Preset::SingleT2 {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeachersConfig {
    #[serde(default = "d_t1")]
    pub t1: TeacherSpec,
    #[serde(default = "d_t2")]
    pub t2: TeacherSpec,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_beam")]
    pub beam_width: usize,
    #[serde(default = "d_max_len")]
    pub max_summary_len: usize,
}

fn d_t1() -> TeacherSpec {
    TeacherSpec {
        hidden_dim: 24,
        epochs: 40,
        learning_rate: 0.05,
    }
}
fn d_t2() -> TeacherSpec {
    TeacherSpec {
        hidden_dim: 24,
        epochs: 20,
        learning_rate: 0.05,
    }
}
fn d_top_k() -> usize {
    8
}
fn d_beam() -> usize {
    4
}
fn d_max_len() -> usize {
    16
}

impl Default for TeachersConfig {
    fn default() -> Self {
        Self {
            t1: d_t1(),
            t2: d_t2(),
            top_k: d_top_k(),
            beam_width: d_beam(),
            max_summary_len: d_max_len(),
        }
    }
}

/// The file as written by a user. `[train]` holds overrides on top of the
/// preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub version: u32,
    pub preset: Preset,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub teachers: TeachersConfig,
    #[serde(default)]
    pub chunk: ChunkConfig,
}

/// Fully resolved and validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub preset: Preset,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub teachers: TeachersConfig,
    pub chunk: ChunkConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    pub fn for_preset(preset: Preset, seed: u64) -> Result<Self, ConfigError> {
        ConfigFile {
            version: CONFIG_VERSION,
            preset,
            seed,
            corpus: CorpusConfig::default(),
            train: toml::Table::new(),
            teachers: TeachersConfig::default(),
            chunk: ChunkConfig::default(),
        }
        .resolve()
    }

    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let mut file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if let Some(s) = seed_override {
            file.seed = s;
        }
        file.resolve()
    }

    pub fn to_toml(&self) -> String {
        let mut train = toml::Table::try_from(TrainConfig {
            seed: 0,
            mixing: crate::teachercache::MixingConfig {
                rng_seed: 0,
                ..self.train.mixing
            },
            ..self.train
        })
        .expect("train config serializes");
        for key in ["seed", "loss_mode", "routing"] {
            train.remove(key);
        }
        if let Some(toml::Value::Table(mut t)) = train.remove("mixing") {
            t.remove("rng_seed");
            train.insert("mixing".into(), toml::Value::Table(t));
        }
        let file = ConfigFile {
            version: self.version,
            preset: self.preset,
            seed: self.seed,
            corpus: self.corpus,
            train,
            teachers: self.teachers,
            chunk: self.chunk,
        };
        toml::to_string(&file).expect("config serializes")
    }
}

impl ConfigFile {
    pub fn resolve(self) -> Result<ExperimentConfig, ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.version));
        }
        for key in ["seed", "loss_mode", "routing"] {
            if self.train.contains_key(key) {
                return Err(ConfigError::Invalid(format!(
                    "[train].{key} is set by the preset or the top-level seed"
                )));
            }
        }
        let mode = self.preset.loss_mode();
        let base = TrainConfig {
            routing: self.preset.routing(),
            ..TrainConfig::preset(mode)
        };
        let mut table = toml::Table::try_from(base).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        merge(&mut table, &self.train);
        let mut train: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(format!("[train]: {e}")))?;
        train.seed = self.seed;
        train.mixing.rng_seed = derive_seed(self.seed, "mixing");
        let cfg = ExperimentConfig {
            version: self.version,
            preset: self.preset,
            seed: self.seed,
            corpus: self.corpus,
            train,
            teachers: self.teachers,
            chunk: self.chunk,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.corpus.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        self.chunk.validate().map_err(|e| inv(&e))?;
        if self.chunk.context_limit != self.train.context_limit {
            return Err(ConfigError::Invalid(format!(
                "chunk.context_limit {} differs from train.context_limit {}",
                self.chunk.context_limit, self.train.context_limit
            )));
        }
        let t = &self.teachers;
        for (name, s) in [("t1", t.t1), ("t2", t.t2)] {
            if s.hidden_dim == 0 || !(s.learning_rate.is_finite() && s.learning_rate > 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "teachers.{name}: bad hidden_dim or learning_rate"
                )));
            }
        }
        if t.top_k == 0 || t.top_k > self.corpus.vocab_size {
            return Err(ConfigError::Invalid(format!(
                "teachers.top_k {} must be in 1..={}",
                t.top_k, self.corpus.vocab_size
            )));
        }
        if t.beam_width == 0 || t.max_summary_len == 0 {
            return Err(ConfigError::Invalid(
                "teachers.beam_width and max_summary_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}
