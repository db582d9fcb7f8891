//! Micro precision/recall/F1 for entities and relation triples, plus
//! mean/SD aggregation over repeated runs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{Span, Triple};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot aggregate an empty run list")]
    EmptyRuns,
    #[error("gold has {gold} sentences but predictions have {pred}")]
    Misaligned { gold: usize, pred: usize },
}

/// Relation scoring criteria. `ConllExact` and `AceBoundary` require the
/// argument spans and relation type to match; `AceStrict` additionally
/// requires both argument entity types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ConllExact,
    AceBoundary,
    AceStrict,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::ConllExact => "conll_exact",
            Criterion::AceBoundary => "ace_boundary",
            Criterion::AceStrict => "ace_strict",
        }
    }
}

/// Micro-averaged counts and derived scores. Zero denominators score 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "tp")]
    pub true_pos: usize,
    #[serde(rename = "fp")]
    pub false_pos: usize,
    #[serde(rename = "fn")]
    pub false_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(true_pos: usize, false_pos: usize, false_neg: usize) -> Metrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(true_pos, true_pos + false_pos);
        let recall = ratio(true_pos, true_pos + false_neg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics { true_pos, false_pos, false_neg, precision, recall, f1 }
    }
}

fn micro_counts<T: Ord>(gold: Vec<BTreeSet<T>>, pred: Vec<BTreeSet<T>>) -> Metrics {
    let mut tp = 0;
    let mut fp = 0;
    let mut fnn = 0;
    for (g, p) in gold.into_iter().zip(pred.into_iter()) {
        tp += p.intersection(&g).count();
        fp += p.difference(&g).count();
        fnn += g.difference(&p).count();
    }
    Metrics::from_counts(tp, fp, fnn)
}

fn check_aligned<A, B>(gold: &[A], pred: &[B]) -> Result<(), EvalError> {
    if gold.len() != pred.len() {
        return Err(EvalError::Misaligned { gold: gold.len(), pred: pred.len() });
    }
    Ok(())
}

/// Exact span-and-type entity matching, micro-averaged over sentences.
/// Duplicates within a sentence are de-duplicated before counting.
pub fn entity_metrics(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<Metrics, EvalError> {
    check_aligned(gold, pred)?;
    let to_sets = |xs: &[Vec<Span>]| {
        xs.iter()
            .map(|s| s.iter().map(|e| (e.start, e.end, e.etype)).collect::<BTreeSet<_>>())
            .collect::<Vec<_>>()
    };
    Ok(micro_counts(to_sets(gold), to_sets(pred)))
}

type BoundaryKey = (usize, usize, usize, usize, usize);
type StrictKey = (usize, usize, usize, usize, usize, usize, usize);

/// Relation triple matching under the chosen criterion, micro-averaged
/// over sentences.
pub fn relation_metrics(
    gold: &[Vec<Triple>],
    pred: &[Vec<Triple>],
    criterion: Criterion,
) -> Result<Metrics, EvalError> {
    check_aligned(gold, pred)?;
    match criterion {
        Criterion::ConllExact | Criterion::AceBoundary => {
            let key = |t: &Triple| -> BoundaryKey {
                (t.head.start, t.head.end, t.tail.start, t.tail.end, t.rtype)
            };
            let to_sets = |xs: &[Vec<Triple>]| {
                xs.iter()
                    .map(|s| s.iter().map(key).collect::<BTreeSet<_>>())
                    .collect::<Vec<_>>()
            };
            Ok(micro_counts(to_sets(gold), to_sets(pred)))
        }
        Criterion::AceStrict => {
            let key = |t: &Triple| -> StrictKey {
                (
                    t.head.start,
                    t.head.end,
                    t.head.etype,
                    t.tail.start,
                    t.tail.end,
                    t.tail.etype,
                    t.rtype,
                )
            };
            let to_sets = |xs: &[Vec<Triple>]| {
                xs.iter()
                    .map(|s| s.iter().map(key).collect::<BTreeSet<_>>())
                    .collect::<Vec<_>>()
            };
            Ok(micro_counts(to_sets(gold), to_sets(pred)))
        }
    }
}

/// Mean and population standard deviation of each score over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub precision_mean: f64,
    pub precision_sd: f64,
    pub recall_mean: f64,
    pub recall_sd: f64,
    pub f1_mean: f64,
    pub f1_sd: f64,
}

pub fn aggregate_runs(runs: &[Metrics]) -> Result<RunAggregate, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::EmptyRuns);
    }
    let stats = |values: Vec<f64>| {
        if values.windows(2).all(|w| w[0] == w[1]) {
            return (values[0], 0.0);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (precision_mean, precision_sd) = stats(runs.iter().map(|m| m.precision).collect());
    let (recall_mean, recall_sd) = stats(runs.iter().map(|m| m.recall).collect());
    let (f1_mean, f1_sd) = stats(runs.iter().map(|m| m.f1).collect());
    Ok(RunAggregate {
        runs: runs.len(),
        precision_mean,
        precision_sd,
        recall_mean,
        recall_sd,
        f1_mean,
        f1_sd,
    })
}
