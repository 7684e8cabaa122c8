//! Offline teacher supervision: top-k log-probability caches, pseudo-label
//! caches, and seeded gold/pseudo target mixing.
//!
//! Cache files are UTF-8 JSON Lines. The first line is a header
//! `{"version":1,"kind":"topk"|"pseudo","vocab_size":V,"k":K}`; every other
//! line is one record.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distmath::{DistError, ProbDist};

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported cache version {found} (expected {CACHE_VERSION})")]
    UnsupportedVersion { path: PathBuf, found: u64 },
    #[error("record {id}: {message}")]
    InvalidRecord { id: String, message: String },
    #[error("position {position} out of range for record with {len} positions")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("record {id} has an empty candidate list at position {position}")]
    EmptyPosition { id: String, position: usize },
    #[error("p_pseudo must lie in [0, 1], got {0}")]
    MixingProbability(f64),
    #[error("p_pseudo > 0 but no pseudo-labels are available")]
    NoPseudoLabels,
    #[error("gold target is empty")]
    EmptyGold,
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, CacheError>;

/// Top-k teacher log-probabilities for every target position of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRecord {
    pub id: String,
    /// Per position, `(token_id, logprob)` sorted by descending logprob.
    pub positions: Vec<Vec<(u32, f64)>>,
}

impl TopKRecord {
    pub fn validate(&self, vocab_size: usize, k: usize) -> Result<()> {
        let bad = |message: String| CacheError::InvalidRecord {
            id: self.id.clone(),
            message,
        };
        for (pos, entries) in self.positions.iter().enumerate() {
            if entries.is_empty() {
                return Err(CacheError::EmptyPosition {
                    id: self.id.clone(),
                    position: pos,
                });
            }
            if entries.len() > k {
                return Err(bad(format!("position {pos} has {} > k={k} entries", entries.len())));
            }
            let mut seen = HashSet::with_capacity(entries.len());
            let mut mass = 0.0;
            for (i, &(tok, lp)) in entries.iter().enumerate() {
                if tok as usize >= vocab_size {
                    return Err(bad(format!("position {pos}: token {tok} >= vocab {vocab_size}")));
                }
                if !seen.insert(tok) {
                    return Err(bad(format!("position {pos}: duplicate token {tok}")));
                }
                if !lp.is_finite() {
                    return Err(bad(format!("position {pos}: non-finite logprob")));
                }
                if i > 0 && lp > entries[i - 1].1 {
                    return Err(bad(format!("position {pos}: logprobs not sorted descending")));
                }
                mass += lp.exp();
            }
            if mass > 1.0 + 1e-6 {
                return Err(bad(format!("position {pos}: probability mass {mass} exceeds 1")));
            }
        }
        Ok(())
    }

    /// Builds a record from full distributions by keeping the `k` most
    /// probable tokens per position (ties broken by lower token id).
    pub fn from_dists(id: impl Into<String>, dists: &[ProbDist], k: usize) -> Self {
        let positions = dists
            .iter()
            .map(|p| {
                let mut order: Vec<usize> = (0..p.len()).filter(|&i| p.as_slice()[i] > 0.0).collect();
                order.sort_by(|&a, &b| p.as_slice()[b].total_cmp(&p.as_slice()[a]).then(a.cmp(&b)));
                order
                    .into_iter()
                    .take(k)
                    .map(|i| (i as u32, p.as_slice()[i].ln()))
                    .collect()
            })
            .collect();
        Self {
            id: id.into(),
            positions,
        }
    }
}

/// A teacher-generated target stored as tokens and text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub id: String,
    pub teacher: String,
    pub beam: u32,
    pub tokens: Vec<u32>,
    pub text: String,
}

impl PseudoLabelRecord {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |message: &str| CacheError::InvalidRecord {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.tokens.is_empty() {
            return Err(bad("empty pseudo summary"));
        }
        if self.beam < 1 {
            return Err(bad("beam width must be at least 1"));
        }
        if self.tokens.iter().any(|&t| t as usize >= vocab_size) {
            return Err(bad("token outside vocabulary"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    Topk,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u64,
    kind: CacheKind,
    vocab_size: usize,
    k: usize,
}

/// Contents of one cache file.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheFile {
    TopK {
        vocab_size: usize,
        k: usize,
        records: Vec<TopKRecord>,
    },
    Pseudo {
        vocab_size: usize,
        records: Vec<PseudoLabelRecord>,
    },
}

impl CacheFile {
    pub fn validate(&self) -> Result<()> {
        match self {
            CacheFile::TopK { vocab_size, k, records } => records.iter().try_for_each(|r| r.validate(*vocab_size, *k)),
            CacheFile::Pseudo { vocab_size, records } => records.iter().try_for_each(|r| r.validate(*vocab_size)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            CacheFile::TopK { records, .. } => records.len(),
            CacheFile::Pseudo { records, .. } => records.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Validates every record, then writes the file. Returns the record count.
pub fn write_cache(cache: &CacheFile, path: &Path) -> Result<usize> {
    cache.validate()?;
    let header = match cache {
        CacheFile::TopK { vocab_size, k, .. } => Header {
            version: CACHE_VERSION as u64,
            kind: CacheKind::Topk,
            vocab_size: *vocab_size,
            k: *k,
        },
        CacheFile::Pseudo { vocab_size, .. } => Header {
            version: CACHE_VERSION as u64,
            kind: CacheKind::Pseudo,
            vocab_size: *vocab_size,
            k: 0,
        },
    };
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut line = |value: String| -> Result<()> {
        out.write_all(value.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(io_err(path))
    };
    line(serde_json::to_string(&header).expect("header serializes"))?;
    match cache {
        CacheFile::TopK { records, .. } => {
            for r in records {
                line(serde_json::to_string(r).expect("record serializes"))?;
            }
        }
        CacheFile::Pseudo { records, .. } => {
            for r in records {
                line(serde_json::to_string(r).expect("record serializes"))?;
            }
        }
    }
    out.flush().map_err(io_err(path))?;
    Ok(cache.len())
}

pub fn read_cache(path: &Path) -> Result<CacheFile> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let malformed = |line: usize, message: String| CacheError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let first = lines
        .next()
        .ok_or_else(|| malformed(1, "missing header".into()))?
        .map_err(io_err(path))?;
    let raw: serde_json::Value = serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CACHE_VERSION as u64 => {}
        Some(found) => {
            return Err(CacheError::UnsupportedVersion {
                path: path.to_path_buf(),
                found,
            })
        }
        None => return Err(malformed(1, "header has no integer version".into())),
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| malformed(1, e.to_string()))?;

    let mut topk = Vec::new();
    let mut pseudo = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(io_err(path))?;
        match header.kind {
            CacheKind::Topk => {
                let r: TopKRecord = serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
                r.validate(header.vocab_size, header.k)
                    .map_err(|e| malformed(lineno, e.to_string()))?;
                topk.push(r);
            }
            CacheKind::Pseudo => {
                let r: PseudoLabelRecord = serde_json::from_str(&line).map_err(|e| malformed(lineno, e.to_string()))?;
                r.validate(header.vocab_size)
                    .map_err(|e| malformed(lineno, e.to_string()))?;
                pseudo.push(r);
            }
        }
    }
    Ok(match header.kind {
        CacheKind::Topk => CacheFile::TopK {
            vocab_size: header.vocab_size,
            k: header.k,
            records: topk,
        },
        CacheKind::Pseudo => CacheFile::Pseudo {
            vocab_size: header.vocab_size,
            records: pseudo,
        },
    })
}

/// Renormalizes the cached top-k mass at `position` over its support; all
/// other vocabulary entries get probability 0.
pub fn densify(record: &TopKRecord, position: usize, vocab_size: usize) -> Result<ProbDist> {
    let entries = record.positions.get(position).ok_or(CacheError::PositionOutOfRange {
        position,
        len: record.positions.len(),
    })?;
    if entries.is_empty() {
        return Err(CacheError::EmptyPosition {
            id: record.id.clone(),
            position,
        });
    }
    let max = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; vocab_size];
    let mut total = 0.0;
    for &(tok, lp) in entries {
        let slot = probs.get_mut(tok as usize).ok_or_else(|| CacheError::InvalidRecord {
            id: record.id.clone(),
            message: format!("token {tok} >= vocab {vocab_size}"),
        })?;
        *slot = (lp - max).exp();
        total += *slot;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(ProbDist::new(probs)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixingConfig {
    #[serde(default = "default_p_pseudo")]
    pub p_pseudo: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_p_pseudo() -> f64 {
    0.3
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            p_pseudo: default_p_pseudo(),
            rng_seed: 0,
        }
    }
}

impl MixingConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.p_pseudo) {
            Ok(())
        } else {
            Err(CacheError::MixingProbability(self.p_pseudo))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source", content = "teacher")]
pub enum TargetSource {
    Gold,
    Pseudo(String),
}

/// Picks the training target for one example: a uniformly chosen
/// pseudo-label with probability `p_pseudo`, otherwise gold. The draw is a
/// pure function of `(cfg.rng_seed, example_index)`.
pub fn sample_target(
    gold: &[u32],
    pseudo: &[&PseudoLabelRecord],
    cfg: &MixingConfig,
    example_index: u64,
) -> Result<(Vec<u32>, TargetSource)> {
    cfg.validate()?;
    if gold.is_empty() {
        return Err(CacheError::EmptyGold);
    }
    if cfg.p_pseudo > 0.0 && pseudo.is_empty() {
        return Err(CacheError::NoPseudoLabels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(example_index);
    let u: f64 = rng.gen();
    if u < cfg.p_pseudo {
        let pick = pseudo[rng.gen_range(0..pseudo.len())];
        Ok((pick.tokens.clone(), TargetSource::Pseudo(pick.teacher.clone())))
    } else {
        Ok((gold.to_vec(), TargetSource::Gold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(id: &str, positions: Vec<Vec<(u32, f64)>>) -> TopKRecord {
        TopKRecord {
            id: id.into(),
            positions,
        }
    }

    fn sample_records() -> Vec<TopKRecord> {
        vec![
            rec("a", vec![vec![(2, 0.6f64.ln()), (0, 0.3f64.ln())]]),
            rec(
                "b",
                vec![vec![(1, 0.9f64.ln())], vec![(3, 0.5f64.ln()), (2, 0.25f64.ln())]],
            ),
            rec("c", vec![vec![(0, 0.1f64.ln()), (1, 0.1f64.ln())]]),
        ]
    }

    #[test]
    fn empty_cache_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let cache = CacheFile::TopK {
            vocab_size: 4,
            k: 2,
            records: vec![],
        };
        assert_eq!(write_cache(&cache, &path).unwrap(), 0);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"version\":1,\"kind\":\"topk\",\"vocab_size\":4,\"k\":2}\n");
        assert_eq!(read_cache(&path).unwrap(), cache);
    }

    #[test]
    fn round_trip_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let cache = CacheFile::TopK {
            vocab_size: 4,
            k: 2,
            records: sample_records(),
        };
        assert_eq!(write_cache(&cache, &path).unwrap(), 3);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 4);
        assert_eq!(read_cache(&path).unwrap(), cache);

        let pseudo = CacheFile::Pseudo {
            vocab_size: 8,
            records: vec![PseudoLabelRecord {
                id: "x".into(),
                teacher: "t1".into(),
                beam: 4,
                tokens: vec![3, 4, 1],
                text: "w3 w4 w1".into(),
            }],
        };
        let p2 = dir.path().join("p.jsonl");
        write_cache(&pseudo, &p2).unwrap();
        assert_eq!(read_cache(&p2).unwrap(), pseudo);
    }

    #[test]
    fn unsorted_record_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let cache = CacheFile::TopK {
            vocab_size: 4,
            k: 2,
            records: vec![rec("bad", vec![vec![(0, 0.2f64.ln()), (1, 0.7f64.ln())]])],
        };
        assert!(matches!(
            write_cache(&cache, &path),
            Err(CacheError::InvalidRecord { .. })
        ));
        assert!(!path.exists());
    }

    #[test]
    fn other_invalid_records() {
        let r = rec("d", vec![vec![(1, -0.1), (1, -0.2)]]);
        assert!(r.validate(4, 4).is_err());
        let r = rec("m", vec![vec![(1, 0.9f64.ln()), (2, 0.5f64.ln())]]);
        assert!(r.validate(4, 4).is_err());
        let r = rec("k", vec![vec![(1, -1.0), (2, -2.0), (3, -3.0)]]);
        assert!(r.validate(4, 2).is_err());
        let r = rec("v", vec![vec![(9, -1.0)]]);
        assert!(r.validate(4, 2).is_err());
    }

    #[test]
    fn truncated_final_line_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let cache = CacheFile::TopK {
            vocab_size: 4,
            k: 2,
            records: sample_records(),
        };
        write_cache(&cache, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 10];
        std::fs::write(&path, cut).unwrap();
        match read_cache(&path) {
            Err(CacheError::Malformed { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        std::fs::write(&path, "{\"version\":2,\"kind\":\"topk\",\"vocab_size\":4,\"k\":2}\n").unwrap();
        assert!(matches!(
            read_cache(&path),
            Err(CacheError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn densify_examples() {
        let p = ProbDist::new(vec![0.6, 0.3, 0.1]).unwrap();
        let full = TopKRecord::from_dists("f", std::slice::from_ref(&p), 3);
        let d = densify(&full, 0, 3).unwrap();
        for (a, b) in d.as_slice().iter().zip(p.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        let top2 = TopKRecord::from_dists("t", &[p], 2);
        let d = densify(&top2, 0, 3).unwrap();
        assert_abs_diff_eq!(d.as_slice()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.as_slice()[1], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(d.as_slice()[2], 0.0);
        assert!(densify(&top2, 1, 3).is_err());
        assert!(matches!(
            densify(&rec("e", vec![vec![]]), 0, 3),
            Err(CacheError::EmptyPosition { .. })
        ));
    }

    fn pseudo(teacher: &str, tokens: Vec<u32>) -> PseudoLabelRecord {
        PseudoLabelRecord {
            id: "x".into(),
            teacher: teacher.into(),
            beam: 4,
            text: String::new(),
            tokens,
        }
    }

    #[test]
    fn mixing_extremes() {
        let gold = vec![5, 6, 7];
        let p = pseudo("t1", vec![9, 9]);
        let never = MixingConfig {
            p_pseudo: 0.0,
            rng_seed: 3,
        };
        let always = MixingConfig {
            p_pseudo: 1.0,
            rng_seed: 3,
        };
        for i in 0..200 {
            assert_eq!(
                sample_target(&gold, &[], &never, i).unwrap(),
                (gold.clone(), TargetSource::Gold)
            );
            assert_eq!(
                sample_target(&gold, &[&p], &always, i).unwrap(),
                (vec![9, 9], TargetSource::Pseudo("t1".into()))
            );
        }
        assert!(matches!(
            sample_target(&gold, &[], &always, 0),
            Err(CacheError::NoPseudoLabels)
        ));
        assert!(matches!(
            sample_target(&[], &[&p], &always, 0),
            Err(CacheError::EmptyGold)
        ));
        let bad = MixingConfig {
            p_pseudo: 1.5,
            rng_seed: 0,
        };
        assert!(sample_target(&gold, &[&p], &bad, 0).is_err());
    }

    #[test]
    fn mixing_is_deterministic_per_index() {
        let gold = vec![1, 2];
        let a = pseudo("a", vec![3]);
        let b = pseudo("b", vec![4]);
        let cfg = MixingConfig {
            p_pseudo: 0.5,
            rng_seed: 11,
        };
        let first: Vec<_> = (0..100)
            .map(|i| sample_target(&gold, &[&a, &b], &cfg, i).unwrap())
            .collect();
        let second: Vec<_> = (0..100)
            .rev()
            .map(|i| sample_target(&gold, &[&a, &b], &cfg, i).unwrap())
            .collect();
        let second: Vec<_> = second.into_iter().rev().collect();
        assert_eq!(first, second);
        // both teachers get picked
        assert!(first.iter().any(|(_, s)| *s == TargetSource::Pseudo("a".into())));
        assert!(first.iter().any(|(_, s)| *s == TargetSource::Pseudo("b".into())));
    }
}
