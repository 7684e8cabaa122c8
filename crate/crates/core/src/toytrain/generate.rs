use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::ToyModel;
use super::EOS;
use crate::distmath::log_softmax_into;

/// Incremental next-token scorer.
pub trait Decoder {
    type State: Clone;
    /// State after reading the document, with next-token log-probabilities.
    fn start(&self, document: &[u32]) -> (Self::State, Vec<f64>);
    fn advance(&self, state: &Self::State, token: u32) -> (Self::State, Vec<f64>);
}

impl Decoder for ToyModel {
    type State = Vec<f64>;

    fn start(&self, document: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let h = self.encode(document);
        let lp = self.log_probs(&h);
        (h, lp)
    }

    fn advance(&self, state: &Vec<f64>, token: u32) -> (Vec<f64>, Vec<f64>) {
        let h = self.step(state, token);
        let lp = self.log_probs(&h);
        (h, lp)
    }
}

impl ToyModel {
    fn log_probs(&self, h: &[f64]) -> Vec<f64> {
        let z = self.logits(h);
        let mut out = vec![0.0; z.len()];
        log_softmax_into(&z, 1.0, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "width")]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub mode: DecodeMode,
    pub max_len: usize,
    /// End token; `None` decodes exactly `max_len` tokens.
    pub eos: Option<u32>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_len: 16,
            eos: Some(EOS),
        }
    }
}

/// Lowest id among the maxima.
fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Decodes a summary. The end token is not included in the output.
pub fn generate<D: Decoder>(model: &D, document: &[u32], cfg: &GenerateConfig) -> Vec<u32> {
    match cfg.mode {
        DecodeMode::Greedy => greedy(model, document, cfg),
        DecodeMode::Beam(b) => beam(model, document, cfg, b.max(1)),
    }
}

fn greedy<D: Decoder>(model: &D, document: &[u32], cfg: &GenerateConfig) -> Vec<u32> {
    let mut out = Vec::new();
    if cfg.max_len == 0 {
        return out;
    }
    let (mut state, mut lp) = model.start(document);
    loop {
        let t = argmax(&lp);
        if Some(t) == cfg.eos {
            break;
        }
        out.push(t);
        if out.len() == cfg.max_len {
            break;
        }
        (state, lp) = model.advance(&state, t);
    }
    out
}

struct Hyp<S> {
    /// Emitted ids, including a trailing end token when finished.
    path: Vec<u32>,
    score: f64,
    finished: bool,
    state: Option<(S, Vec<f64>)>,
}

/// Higher score first; ties go to the lexicographically smaller id path.
fn rank<S>(a: &Hyp<S>, b: &Hyp<S>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

fn beam<D: Decoder>(model: &D, document: &[u32], cfg: &GenerateConfig, width: usize) -> Vec<u32> {
    if cfg.max_len == 0 {
        return Vec::new();
    }
    let mut beams = vec![Hyp {
        path: Vec::new(),
        score: 0.0,
        finished: false,
        state: Some(model.start(document)),
    }];
    loop {
        let mut pool = Vec::new();
        for h in beams {
            if h.finished {
                pool.push(h);
                continue;
            }
            let (state, lp) = h.state.as_ref().expect("live hypothesis has state");
            for (t, &l) in lp.iter().enumerate() {
                let t = t as u32;
                let mut path = h.path.clone();
                path.push(t);
                let done = Some(t) == cfg.eos;
                pool.push(Hyp {
                    path,
                    score: h.score + l,
                    finished: done,
                    state: if done { None } else { Some((state.clone(), Vec::new())) },
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(width);
        let at_cap = |h: &Hyp<D::State>| h.path.len() >= cfg.max_len;
        for h in pool.iter_mut() {
            if !h.finished && at_cap(h) {
                h.finished = true;
                h.state = None;
            } else if !h.finished {
                let (s, _) = h.state.take().expect("live hypothesis has state");
                h.state = Some(model.advance(&s, *h.path.last().expect("non-empty path")));
            }
        }
        if pool.iter().all(|h| h.finished) {
            let best = pool.into_iter().min_by(rank).expect("beam is non-empty");
            let mut path = best.path;
            if path.last().copied() == cfg.eos && cfg.eos.is_some() {
                path.pop();
            }
            return path;
        }
        beams = pool;
    }
}
