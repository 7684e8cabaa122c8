//! Token-level ROUGE-1/2/L and teacher retention.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("teacher ROUGE-L must be positive, got {0}")]
    ZeroTeacher(f64),
    #[error("ROUGE-N supports n in {{1, 2}}, got {0}")]
    UnsupportedN(usize),
    #[error("cannot aggregate an empty evaluation set")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub student_rouge_l: f64,
    pub teacher_rouge_l: f64,
    /// `100 · student / teacher`; may exceed 100.
    pub retention: f64,
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N F1 with clipped n-gram counts.
pub fn rouge_n<T: Eq + std::hash::Hash>(hyp: &[T], reference: &[T], n: usize) -> Result<f64, MetricsError> {
    if !(1..=2).contains(&n) {
        return Err(MetricsError::UnsupportedN(n));
    }
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let overlap: usize = h
        .iter()
        .map(|(gram, &c)| c.min(r.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |seq: &[T]| seq.len().saturating_sub(n - 1);
    Ok(f1(overlap, total(hyp), total(reference)))
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    f1(lcs_len(hyp, reference), hyp.len(), reference.len())
}

pub fn rouge_scores<T: Eq + std::hash::Hash>(hyp: &[T], reference: &[T]) -> RougeScores {
    RougeScores {
        rouge1: rouge_n(hyp, reference, 1).expect("n=1 supported"),
        rouge2: rouge_n(hyp, reference, 2).expect("n=2 supported"),
        rouge_l: rouge_l(hyp, reference),
    }
}

/// Mean of per-example F1 scores, summed in input order.
pub fn corpus_scores(per_example: &[RougeScores]) -> Result<RougeScores, MetricsError> {
    if per_example.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = per_example.len() as f64;
    let mut sum = RougeScores::default();
    for s in per_example {
        sum.rouge1 += s.rouge1;
        sum.rouge2 += s.rouge2;
        sum.rouge_l += s.rouge_l;
    }
    Ok(RougeScores {
        rouge1: sum.rouge1 / n,
        rouge2: sum.rouge2 / n,
        rouge_l: sum.rouge_l / n,
    })
}

pub fn retention(student: &RougeScores, teacher: &RougeScores) -> Result<RetentionReport, MetricsError> {
    if teacher.rouge_l.is_nan() || teacher.rouge_l <= 0.0 {
        return Err(MetricsError::ZeroTeacher(teacher.rouge_l));
    }
    Ok(RetentionReport {
        student_rouge_l: student.rouge_l,
        teacher_rouge_l: teacher.rouge_l,
        retention: 100.0 * student.rouge_l / teacher.rouge_l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rouge_n_examples() {
        let x = ["a", "b", "c"];
        assert_eq!(rouge_n(&x, &x, 1).unwrap(), 1.0);
        assert_eq!(rouge_n(&x, &x, 2).unwrap(), 1.0);
        assert_eq!(rouge_n(&x, &["d", "e"], 1).unwrap(), 0.0);
        assert_abs_diff_eq!(rouge_n(&x, &["a", "c", "d"], 1).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(rouge_n(&["a"], &["a"], 2).unwrap(), 0.0);
        assert!(rouge_n(&x, &x, 3).is_err());
    }

    #[test]
    fn clipped_counts() {
        // hyp repeats "a"; only one reference "a" may be matched
        let p = 1.0 / 3.0;
        let r = 1.0 / 2.0;
        assert_abs_diff_eq!(
            rouge_n(&["a", "a", "a"], &["a", "b"], 1).unwrap(),
            2.0 * p * r / (p + r),
            epsilon = 1e-15
        );
    }

    #[test]
    fn rouge_l_examples() {
        let x = ["cat", "the", "sat"];
        assert_eq!(rouge_l(&x, &x), 1.0);
        assert_eq!(lcs_len(&x, &["the", "cat", "sat"]), 2);
        assert_abs_diff_eq!(rouge_l(&x, &["the", "cat", "sat"]), 2.0 / 3.0, epsilon = 1e-15);
        let empty: [&str; 0] = [];
        assert_eq!(rouge_l(&empty, &x), 0.0);
    }

    #[test]
    fn retention_examples() {
        let s = |l: f64| RougeScores {
            rouge_l: l,
            ..Default::default()
        };
        assert_eq!(retention(&s(0.3), &s(0.3)).unwrap().retention, 100.0);
        assert_abs_diff_eq!(retention(&s(0.308), &s(0.372)).unwrap().retention, 82.8, epsilon = 0.3);
        assert_abs_diff_eq!(retention(&s(0.491), &s(0.401)).unwrap().retention, 122.4, epsilon = 0.1);
        assert!(retention(&s(0.3), &s(0.0)).is_err());
    }

    #[test]
    fn corpus_mean() {
        let a = RougeScores {
            rouge1: 1.0,
            rouge2: 0.5,
            rouge_l: 0.25,
        };
        let b = RougeScores::default();
        let m = corpus_scores(&[a, b]).unwrap();
        assert_eq!((m.rouge1, m.rouge2, m.rouge_l), (0.5, 0.25, 0.125));
        assert_eq!(corpus_scores(&[]), Err(MetricsError::Empty));
    }
}
