//! Desk-scale recurrent models, synthetic corpus, training and decoding.

mod corpus;
mod generate;
mod model;
mod train;

pub use corpus::{Corpus, CorpusConfig, Example};
pub use generate::{generate, DecodeMode, Decoder, GenerateConfig};
pub use model::{ForwardPass, ToyModel};
pub use train::{
    backward, calibrate_anchor, gate_trace, train, Checkpoint, EpochMetrics, ExampleLoss, LossMode, Objective,
    RoutingArm, StudentGrads, StudentParams, Supervision, TeacherSignals, TeacherSource, TopKIndex, TraceRecord,
    TrainConfig, TrainOutcome, CHECKPOINT_VERSION,
};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::losses::LossError;
use crate::teachercache::CacheError;

/// Decoder start symbol; also used as padding.
pub const SEP: u32 = 0;
pub const EOS: u32 = 1;
/// Sentence terminator inside documents.
pub const BOUNDARY: u32 = 2;
pub const FIRST_CONTENT: u32 = 3;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite parameter or activation")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no teacher signal for example {0}")]
    MissingSupervision(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("unknown example id {0}")]
    UnknownExample(String),
    #[error("unparseable token {0:?}")]
    BadToken(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Independent seed for a named consumer of the root seed.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    // FNV-1a keeps the label hash stable across platforms and releases.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(h);
    rng.next_u64()
}

/// Renders tokens as `w<id>` words.
pub fn detokenize(tokens: &[u32]) -> String {
    tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ")
}

/// Inverse of [`detokenize`]; also accepts bare integers.
pub fn tokenize(text: &str) -> Result<Vec<u32>, ToyError> {
    text.split_whitespace()
        .map(|w| {
            w.strip_prefix('w')
                .unwrap_or(w)
                .parse::<u32>()
                .map_err(|_| ToyError::BadToken(w.to_string()))
        })
        .collect()
}
