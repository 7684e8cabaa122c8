use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ToyError, BOUNDARY, FIRST_CONTENT};

/// Synthetic compression task: each sentence carries exactly one salient
/// token among filler, and the summary lists the salient tokens in order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_salient")]
    pub salient_tokens: usize,
    #[serde(default = "d_train")]
    pub train_size: usize,
    #[serde(default = "d_val")]
    pub val_size: usize,
    #[serde(default = "d_test")]
    pub test_size: usize,
    #[serde(default = "d_min_s")]
    pub min_sentences: usize,
    #[serde(default = "d_max_s")]
    pub max_sentences: usize,
    #[serde(default = "d_min_len")]
    pub min_sentence_len: usize,
    #[serde(default = "d_max_len")]
    pub max_sentence_len: usize,
}

fn d_vocab() -> usize {
    64
}
fn d_salient() -> usize {
    6
}
fn d_train() -> usize {
    2000
}
fn d_val() -> usize {
    100
}
fn d_test() -> usize {
    500
}
fn d_min_s() -> usize {
    1
}
fn d_max_s() -> usize {
    3
}
fn d_min_len() -> usize {
    2
}
fn d_max_len() -> usize {
    4
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: d_vocab(),
            salient_tokens: d_salient(),
            train_size: d_train(),
            val_size: d_val(),
            test_size: d_test(),
            min_sentences: d_min_s(),
            max_sentences: d_max_s(),
            min_sentence_len: d_min_len(),
            max_sentence_len: d_max_len(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: &str| Err(ToyError::Config(format!("corpus: {m}")));
        if self.vocab_size > 64 {
            return bad("vocab_size must be at most 64");
        }
        let content = self.vocab_size.saturating_sub(FIRST_CONTENT as usize);
        if self.salient_tokens == 0 || self.salient_tokens >= content {
            return bad("need at least one salient and one filler token");
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad("sentence count range is empty");
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return bad("sentence length range is empty");
        }
        Ok(())
    }

    fn salient_range(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT..FIRST_CONTENT + self.salient_tokens as u32
    }

    fn filler_range(&self) -> std::ops::Range<u32> {
        FIRST_CONTENT + self.salient_tokens as u32..self.vocab_size as u32
    }

    pub fn is_salient(&self, token: u32) -> bool {
        self.salient_range().contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub document: Vec<u32>,
    pub summary: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab_size: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig, seed: u64) -> Result<Self, ToyError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut split = |prefix: &str, n: usize| -> Vec<Example> {
            (0..n)
                .map(|i| sample_example(cfg, &mut rng, format!("{prefix}-{i:05}")))
                .collect()
        };
        let train = split("train", cfg.train_size);
        let val = split("val", cfg.val_size);
        let test = split("test", cfg.test_size);
        Ok(Self {
            vocab_size: cfg.vocab_size,
            train,
            val,
            test,
        })
    }

    pub fn find(&self, id: &str) -> Option<&Example> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .find(|e| e.id == id)
    }

    /// A document of at least `min_tokens` tokens built from fresh sentences.
    pub fn long_document(cfg: &CorpusConfig, seed: u64, min_tokens: usize) -> Result<Example, ToyError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut document = Vec::new();
        let mut summary = Vec::new();
        while document.len() < min_tokens {
            let (sentence, key) = sample_sentence(cfg, &mut rng);
            document.extend(sentence);
            summary.push(key);
        }
        Ok(Example {
            id: "long-00000".into(),
            document,
            summary,
        })
    }
}

fn sample_sentence(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> (Vec<u32>, u32) {
    let len = rng.gen_range(cfg.min_sentence_len..=cfg.max_sentence_len);
    let key_pos = rng.gen_range(0..len);
    let key = rng.gen_range(cfg.salient_range());
    let mut s: Vec<u32> = (0..len)
        .map(|i| {
            if i == key_pos {
                key
            } else {
                rng.gen_range(cfg.filler_range())
            }
        })
        .collect();
    s.push(BOUNDARY);
    (s, key)
}

fn sample_example(cfg: &CorpusConfig, rng: &mut ChaCha8Rng, id: String) -> Example {
    let n = rng.gen_range(cfg.min_sentences..=cfg.max_sentences);
    let mut document = Vec::new();
    let mut summary = Vec::with_capacity(n);
    for _ in 0..n {
        let (s, key) = sample_sentence(cfg, rng);
        document.extend(s);
        summary.push(key);
    }
    Example { id, document, summary }
}
