//! MapReduce summarization for documents longer than the context limit:
//! sentence-aligned chunking with overlap, per-chunk MAP, Jaccard sentence
//! dedup and recursive REDUCE.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Recursion guard for the REDUCE phase.
pub const MAX_REDUCE_DEPTH: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LongDocError {
    #[error("invalid chunk config: {0}")]
    Config(String),
    #[error("sentence {index} has {len} tokens, more than the chunk capacity {capacity}")]
    SentenceTooLong { index: usize, len: usize, capacity: usize },
    #[error("reduce step at depth {depth} did not shrink its input ({before} -> {after} tokens)")]
    NotShrinking { depth: usize, before: usize, after: usize },
    #[error("reduce recursion exceeded depth {MAX_REDUCE_DEPTH} ({len} tokens remain)")]
    DepthExceeded { len: usize },
}

pub type Result<T> = std::result::Result<T, LongDocError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkConfig {
    /// Maximum tokens per chunk.
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    /// Overlap between consecutive chunks, in sentences.
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_threshold")]
    pub jaccard_threshold: f64,
    #[serde(default = "default_context")]
    pub context_limit: usize,
    /// Sentence-boundary token id.
    #[serde(default = "default_boundary")]
    pub boundary: u32,
}

fn default_capacity() -> usize {
    56
}
fn default_overlap() -> usize {
    3
}
fn default_threshold() -> f64 {
    0.75
}
fn default_context() -> usize {
    64
}
fn default_boundary() -> u32 {
    crate::toytrain::BOUNDARY
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            capacity: default_capacity(),
            overlap: default_overlap(),
            jaccard_threshold: default_threshold(),
            context_limit: default_context(),
            boundary: default_boundary(),
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 || self.capacity > self.context_limit {
            return Err(LongDocError::Config(format!(
                "need 0 < capacity ({}) <= context_limit ({})",
                self.capacity, self.context_limit
            )));
        }
        if !(0.0..=1.0).contains(&self.jaccard_threshold) {
            return Err(LongDocError::Config(format!(
                "jaccard threshold {} outside [0, 1]",
                self.jaccard_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    Direct,
    MapReduce,
}

pub fn route(token_count: usize, context_limit: usize) -> Route {
    if token_count <= context_limit {
        Route::Direct
    } else {
        Route::MapReduce
    }
}

/// Splits after every boundary token; the boundary stays with its sentence.
pub fn split_sentences(tokens: &[u32], boundary: u32) -> Vec<Vec<u32>> {
    tokens
        .split_inclusive(|&t| t == boundary)
        .map(<[u32]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    /// First sentence index (inclusive).
    pub start: usize,
    /// Last sentence index (inclusive).
    pub end: usize,
    pub tokens: Vec<u32>,
}

/// Greedy sentence accumulation up to `capacity` tokens. The next chunk
/// starts `overlap` sentences before the previous chunk's end; overlap
/// sentences count against its capacity and are trimmed from the front when
/// they would leave no room for a new sentence.
pub fn chunk(sentences: &[Vec<u32>], cfg: &ChunkConfig) -> Result<Vec<Chunk>> {
    cfg.validate()?;
    if let Some((index, s)) = sentences.iter().enumerate().find(|(_, s)| s.len() > cfg.capacity) {
        return Err(LongDocError::SentenceTooLong {
            index,
            len: s.len(),
            capacity: cfg.capacity,
        });
    }
    let mut chunks = Vec::new();
    if sentences.is_empty() {
        return Ok(chunks);
    }
    let n = sentences.len();
    let mut start = 0;
    loop {
        let mut end = start;
        let mut total = sentences[start].len();
        while end + 1 < n && total + sentences[end + 1].len() <= cfg.capacity {
            end += 1;
            total += sentences[end].len();
        }
        chunks.push(Chunk {
            start,
            end,
            tokens: sentences[start..=end].concat(),
        });
        if end + 1 >= n {
            return Ok(chunks);
        }
        // at least one new sentence per chunk
        let mut next = (end + 1).saturating_sub(cfg.overlap).max(start + 1);
        let new_len = sentences[end + 1].len();
        while next <= end && sentences[next..=end].iter().map(Vec::len).sum::<usize>() + new_len > cfg.capacity {
            next += 1;
        }
        start = next;
    }
}

/// Jaccard similarity of the token-id sets; two empty sets score 1.
pub fn jaccard(a: &[u32], b: &[u32]) -> f64 {
    let sa: HashSet<u32> = a.iter().copied().collect();
    let sb: HashSet<u32> = b.iter().copied().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupDecision {
    pub index: usize,
    pub kept: bool,
    /// Index (into the input) of the kept sentence that caused the drop.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub duplicate_of: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity: Option<f64>,
}

/// First-occurrence dedup: a sentence is dropped iff its Jaccard similarity
/// to some already kept sentence exceeds `threshold`.
pub fn dedup(sentences: &[Vec<u32>], threshold: f64) -> (Vec<Vec<u32>>, Vec<DedupDecision>) {
    let mut kept: Vec<usize> = Vec::new();
    let mut decisions = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let hit = kept
            .iter()
            .map(|&k| (k, jaccard(&sentences[k], s)))
            .find(|&(_, j)| j > threshold);
        match hit {
            Some((k, j)) => decisions.push(DedupDecision {
                index: i,
                kept: false,
                duplicate_of: Some(k),
                similarity: Some(j),
            }),
            None => {
                kept.push(i);
                decisions.push(DedupDecision {
                    index: i,
                    kept: true,
                    duplicate_of: None,
                    similarity: None,
                });
            }
        }
    }
    (kept.into_iter().map(|i| sentences[i].clone()).collect(), decisions)
}

/// Anything that turns a token sequence into a (shorter) summary.
pub trait Summarizer: Sync {
    fn summarize(&self, tokens: &[u32]) -> Vec<u32>;
}

impl<F> Summarizer for F
where
    F: Fn(&[u32]) -> Vec<u32> + Sync,
{
    fn summarize(&self, tokens: &[u32]) -> Vec<u32> {
        self(tokens)
    }
}

/// One chunk/summarize/dedup pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    /// 0 for the MAP level, then 1.. for REDUCE levels.
    pub depth: usize,
    pub input_tokens: usize,
    pub chunks: Vec<Chunk>,
    pub outputs: Vec<Vec<u32>>,
    pub dedup: Vec<DedupDecision>,
    pub output_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReduceTrace {
    pub route: Route,
    pub source_sentences: usize,
    pub levels: Vec<LevelTrace>,
    /// Number of REDUCE applications (0 on the direct path).
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongSummary {
    pub summary: Vec<u32>,
    pub trace: MapReduceTrace,
}

fn with_boundary(mut tokens: Vec<u32>, boundary: u32) -> Vec<u32> {
    if tokens.last() != Some(&boundary) {
        tokens.push(boundary);
    }
    tokens
}

/// Chunks `input`, summarizes every chunk (in parallel, reassembled in chunk
/// order), then dedups the resulting sentences.
fn run_level(input: &[u32], model: &dyn Summarizer, cfg: &ChunkConfig, depth: usize) -> Result<(Vec<u32>, LevelTrace)> {
    let sentences = split_sentences(input, cfg.boundary);
    let chunks = chunk(&sentences, cfg)?;
    let outputs: Vec<Vec<u32>> = chunks.par_iter().map(|c| model.summarize(&c.tokens)).collect();
    let out_sentences: Vec<Vec<u32>> = outputs
        .iter()
        .filter(|o| !o.is_empty())
        .flat_map(|o| split_sentences(&with_boundary(o.clone(), cfg.boundary), cfg.boundary))
        .collect();
    let (kept, decisions) = dedup(&out_sentences, cfg.jaccard_threshold);
    let merged = kept.concat();
    let trace = LevelTrace {
        depth,
        input_tokens: input.len(),
        chunks,
        outputs,
        dedup: decisions,
        output_tokens: merged.len(),
    };
    Ok((merged, trace))
}

/// Length-routed summarization. Documents within the context limit go
/// straight to the MAP model. Longer ones are chunked and mapped; the
/// deduplicated concatenation is then reduced until it fits the context
/// limit, each step required to shrink its input.
pub fn summarize_long(
    document: &[u32],
    map_model: &dyn Summarizer,
    reduce_model: &dyn Summarizer,
    cfg: &ChunkConfig,
) -> Result<LongSummary> {
    cfg.validate()?;
    let source_sentences = split_sentences(document, cfg.boundary).len();
    if route(document.len(), cfg.context_limit) == Route::Direct {
        return Ok(LongSummary {
            summary: map_model.summarize(document),
            trace: MapReduceTrace {
                route: Route::Direct,
                source_sentences,
                levels: Vec::new(),
                depth: 0,
            },
        });
    }

    let (mut current, level) = run_level(document, map_model, cfg, 0)?;
    let mut levels = vec![level];
    let mut depth = 0;
    loop {
        depth += 1;
        if depth > MAX_REDUCE_DEPTH {
            return Err(LongDocError::DepthExceeded { len: current.len() });
        }
        let next = if current.len() <= cfg.context_limit {
            reduce_model.summarize(&current)
        } else {
            let (merged, level) = run_level(&current, reduce_model, cfg, depth)?;
            levels.push(level);
            merged
        };
        if next.len() <= cfg.context_limit {
            return Ok(LongSummary {
                summary: next,
                trace: MapReduceTrace {
                    route: Route::MapReduce,
                    source_sentences,
                    levels,
                    depth,
                },
            });
        }
        if next.len() >= current.len() {
            return Err(LongDocError::NotShrinking {
                depth,
                before: current.len(),
                after: next.len(),
            });
        }
        current = next;
    }
}
