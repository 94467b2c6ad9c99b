//! Multi-label evaluation: pooled micro F1 and per-sample accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction count {pred} differs from gold count {gold}")]
    LengthMismatch { pred: usize, gold: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check<T>(pred: &[T], gold: &[T]) -> Result<(), MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    Ok(())
}

/// TP/FP/FN pooled over every (sample, label) pair.
pub fn micro_counts<T: Ord>(pred: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<Counts, MetricsError> {
    check(pred, gold)?;
    let mut c = Counts::default();
    for (p, g) in pred.iter().zip(gold) {
        let tp = p.intersection(g).count();
        c.tp += tp;
        c.fp += p.len() - tp;
        c.fn_ += g.len() - tp;
    }
    Ok(c)
}

/// `2TP / (2TP + FP + FN)`, 0 when nothing is predicted or gold.
pub fn micro_f1<T: Ord>(pred: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<(f64, Counts), MetricsError> {
    let c = micro_counts(pred, gold)?;
    Ok((c.f1(), c))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Predicted set must equal the gold set.
    #[default]
    ExactMatch,
    /// Mean `|P ∩ G| / |P ∪ G|`, with two empty sets scoring 1.
    Jaccard,
}

/// Strict exact-match rate. An empty input is vacuously 1.0.
pub fn sample_accuracy<T: Ord>(pred: &[BTreeSet<T>], gold: &[BTreeSet<T>]) -> Result<f64, MetricsError> {
    sample_accuracy_with(AccuracyMode::ExactMatch, pred, gold)
}

pub fn sample_accuracy_with<T: Ord>(
    mode: AccuracyMode,
    pred: &[BTreeSet<T>],
    gold: &[BTreeSet<T>],
) -> Result<f64, MetricsError> {
    check(pred, gold)?;
    if pred.is_empty() {
        warn!("sample accuracy over zero samples; reporting 1.0");
        return Ok(1.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| match mode {
            AccuracyMode::ExactMatch => f64::from(u8::from(p == g)),
            AccuracyMode::Jaccard => {
                let union = p.union(g).count();
                if union == 0 {
                    1.0
                } else {
                    p.intersection(g).count() as f64 / union as f64
                }
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub sample_accuracy: f64,
    pub per_type: BTreeMap<String, TypeScores>,
    pub counts: Counts,
    pub samples: usize,
}

pub fn evaluate<T: Ord + Clone + Display>(
    pred: &[BTreeSet<T>],
    gold: &[BTreeSet<T>],
    mode: AccuracyMode,
) -> Result<EvalReport, MetricsError> {
    let (micro_f1, counts) = micro_f1(pred, gold)?;
    let sample_accuracy = sample_accuracy_with(mode, pred, gold)?;
    let mut per: BTreeMap<T, Counts> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        for t in p.union(g) {
            let c = per.entry(t.clone()).or_default();
            match (p.contains(t), g.contains(t)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => unreachable!("t comes from the union"),
            }
        }
    }
    let per_type = per
        .into_iter()
        .map(|(t, c)| {
            (
                t.to_string(),
                TypeScores {
                    precision: c.precision(),
                    recall: c.recall(),
                    f1: c.f1(),
                    support: c.tp + c.fn_,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        micro_f1,
        sample_accuracy,
        per_type,
        counts,
        samples: pred.len(),
    })
}

/// Aligned text table, one row per split, scores in percent.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "Split", "Micro-F1", "Accuracy");
    for (name, r) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>8.2}  {:>8.2}\n",
            name,
            100.0 * r.micro_f1,
            100.0 * r.sample_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[&[&'static str]]) -> Vec<BTreeSet<&'static str>> {
        v.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn hand_counted_example() {
        let pred = sets(&[&["A"], &["A", "B"]]);
        let gold = sets(&[&["A"], &["B"]]);
        let (f1, c) = micro_f1(&pred, &gold).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 0));
        assert!((c.precision() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.recall(), 1.0);
        assert!((f1 - 0.8).abs() < 1e-15);
        assert_eq!(sample_accuracy(&pred, &gold).unwrap(), 0.5);
    }

    #[test]
    fn identical_and_empty() {
        let gold = sets(&[&["A"], &["B", "C"]]);
        assert_eq!(micro_f1(&gold, &gold).unwrap().0, 1.0);
        assert_eq!(sample_accuracy(&gold, &gold).unwrap(), 1.0);
        let empty = sets(&[&[], &[]]);
        assert_eq!(micro_f1(&empty, &gold).unwrap().0, 0.0);
        let none: Vec<BTreeSet<&str>> = Vec::new();
        assert_eq!(sample_accuracy(&none, &none).unwrap(), 1.0);
    }

    #[test]
    fn length_mismatch() {
        let a = sets(&[&["A"]]);
        let b = sets(&[&["A"], &["B"]]);
        assert_eq!(
            micro_f1(&a, &b).unwrap_err(),
            MetricsError::LengthMismatch { pred: 1, gold: 2 }
        );
        assert!(sample_accuracy(&a, &b).is_err());
    }

    #[test]
    fn jaccard_mode() {
        let pred = sets(&[&["A"], &["A", "B"]]);
        let gold = sets(&[&["A"], &["B"]]);
        let j = sample_accuracy_with(AccuracyMode::Jaccard, &pred, &gold).unwrap();
        assert!((j - 0.75).abs() < 1e-15);
    }

    #[test]
    fn report_and_table() {
        let pred = sets(&[&["A"], &["A", "B"]]);
        let gold = sets(&[&["A"], &["B"]]);
        let r = evaluate(&pred, &gold, AccuracyMode::ExactMatch).unwrap();
        assert_eq!(r.per_type["A"].support, 1);
        assert_eq!(r.per_type["A"].precision, 0.5);
        assert_eq!(r.per_type["B"].f1, 1.0);
        let t = render_table(&[("dev", &r), ("test", &r)]);
        assert!(t.contains("Micro-F1"));
        assert!(t.lines().nth(1).unwrap().contains("80.00"));
        assert!(t.lines().nth(1).unwrap().contains("50.00"));
    }
}
