//! Tiny tanh-recurrent language model used for both teachers and students.
//!
//! The model reads the document, then a start token, then the teacher-forced
//! target: `h_t = tanh(R h_{t−1} + E[x_t])`, `logits_t = h_tᵀ O`. Logits are
//! emitted only for target positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ToyError, SEP};
use crate::distmath::LogitVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    /// `|V| × d`, row per token.
    pub embedding: Vec<f64>,
    /// `d × d`, row-major; `(R h)_i = Σ_j R_ij h_j`.
    pub recurrence: Vec<f64>,
    /// `d × |V|`, row-major.
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Every input consumed: document, start token, target prefix.
    pub inputs: Vec<u32>,
    /// Hidden state after each input.
    pub hidden: Vec<Vec<f64>>,
    /// One logit vector per target position.
    pub logits: Vec<LogitVector>,
    /// Index into `hidden` of the first target position.
    pub target_offset: usize,
}

impl ForwardPass {
    /// Hidden states that produced the target logits.
    pub fn target_hidden(&self) -> &[Vec<f64>] {
        &self.hidden[self.target_offset..]
    }
}

impl ToyModel {
    pub fn zeros(vocab_size: usize, hidden_dim: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim,
            embedding: vec![0.0; vocab_size * hidden_dim],
            recurrence: vec![0.0; hidden_dim * hidden_dim],
            output: vec![0.0; hidden_dim * vocab_size],
        }
    }

    pub fn init(vocab_size: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let mut draw = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-s..s)).collect() };
        Self {
            vocab_size,
            hidden_dim,
            embedding: draw(vocab_size * hidden_dim, 0.5),
            recurrence: draw(hidden_dim * hidden_dim, scale),
            output: draw(hidden_dim * vocab_size, scale),
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let (v, d) = (self.vocab_size, self.hidden_dim);
        if v < 2 || d == 0 {
            return Err(ToyError::Shape(format!("vocab {v}, hidden {d}")));
        }
        if self.embedding.len() != v * d || self.recurrence.len() != d * d || self.output.len() != d * v {
            return Err(ToyError::Shape("parameter array sizes do not match dimensions".into()));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !(finite(&self.embedding) && finite(&self.recurrence) && finite(&self.output)) {
            return Err(ToyError::NonFinite);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.recurrence.len() + self.output.len()
    }

    /// All parameters in a fixed order (embedding, recurrence, output).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.embedding
            .iter_mut()
            .chain(self.recurrence.iter_mut())
            .chain(self.output.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.embedding.iter().chain(&self.recurrence).chain(&self.output)
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), ToyError> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&t) => Err(ToyError::TokenOutOfRange {
                token: t,
                vocab: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// One recurrence step.
    pub fn step(&self, prev: &[f64], token: u32) -> Vec<f64> {
        let d = self.hidden_dim;
        let emb = &self.embedding[token as usize * d..(token as usize + 1) * d];
        (0..d)
            .map(|i| {
                let row = &self.recurrence[i * d..(i + 1) * d];
                let pre: f64 = row.iter().zip(prev).map(|(r, h)| r * h).sum::<f64>() + emb[i];
                pre.tanh()
            })
            .collect()
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut out = vec![0.0; v];
        for (i, &hi) in h.iter().enumerate() {
            let row = &self.output[i * v..(i + 1) * v];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += hi * w;
            }
        }
        out
    }

    /// Hidden state after reading `document` and the start token.
    pub fn encode(&self, document: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.hidden_dim];
        for &t in document.iter().chain(std::iter::once(&SEP)) {
            h = self.step(&h, t);
        }
        h
    }

    /// Teacher-forced pass over `target`.
    pub fn forward(&self, document: &[u32], target: &[u32]) -> Result<ForwardPass, ToyError> {
        self.check_tokens(document)?;
        self.check_tokens(target)?;
        let mut inputs = Vec::with_capacity(document.len() + target.len() + 1);
        inputs.extend_from_slice(document);
        inputs.push(SEP);
        if let Some((_, prefix)) = target.split_last() {
            inputs.extend_from_slice(prefix);
        }
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut h = vec![0.0; self.hidden_dim];
        for &x in &inputs {
            h = self.step(&h, x);
            hidden.push(h.clone());
        }
        let target_offset = document.len();
        let logits = hidden[target_offset..]
            .iter()
            .take(target.len())
            .map(|h| LogitVector::new(self.logits(h)).map_err(|_| ToyError::NonFinite))
            .collect::<Result<Vec<_>, _>>()?;
        if target.is_empty() {
            hidden.truncate(target_offset);
        }
        Ok(ForwardPass {
            inputs,
            hidden,
            logits,
            target_offset,
        })
    }

    /// Backpropagation through time. `logit_grads[t]` is `∂L/∂logits_t` for
    /// target position `t`; `hidden_grads`, when given, adds `∂L/∂h` at the
    /// same target positions.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        logit_grads: &[Vec<f64>],
        hidden_grads: Option<&[Vec<f64>]>,
    ) -> ToyModel {
        let (v, d) = (self.vocab_size, self.hidden_dim);
        let mut grads = ToyModel::zeros(v, d);
        let steps = pass.hidden.len();
        let mut dh_in: Vec<Vec<f64>> = vec![vec![0.0; d]; steps];
        for (t, g) in logit_grads.iter().enumerate() {
            let s = pass.target_offset + t;
            let h = &pass.hidden[s];
            for i in 0..d {
                let orow = &self.output[i * v..(i + 1) * v];
                let grow = &mut grads.output[i * v..(i + 1) * v];
                let mut acc = 0.0;
                for k in 0..v {
                    grow[k] += h[i] * g[k];
                    acc += orow[k] * g[k];
                }
                dh_in[s][i] += acc;
            }
        }
        if let Some(hg) = hidden_grads {
            for (t, g) in hg.iter().enumerate() {
                let s = pass.target_offset + t;
                for (a, b) in dh_in[s].iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        let zero = vec![0.0; d];
        let mut carry = vec![0.0; d];
        for s in (0..steps).rev() {
            let h = &pass.hidden[s];
            let prev = if s == 0 { &zero } else { &pass.hidden[s - 1] };
            let da: Vec<f64> = (0..d).map(|i| (dh_in[s][i] + carry[i]) * (1.0 - h[i] * h[i])).collect();
            let x = pass.inputs[s] as usize;
            for i in 0..d {
                grads.embedding[x * d + i] += da[i];
                let rrow = &mut grads.recurrence[i * d..(i + 1) * d];
                for j in 0..d {
                    rrow[j] += da[i] * prev[j];
                }
            }
            let mut next = vec![0.0; d];
            for i in 0..d {
                let row = &self.recurrence[i * d..(i + 1) * d];
                for j in 0..d {
                    next[j] += row[j] * da[i];
                }
            }
            carry = next;
        }
        grads
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ToyModel, scale: f64) {
        for (a, b) in self.params_mut().zip(other.params()) {
            *a += scale * b;
        }
    }
}
