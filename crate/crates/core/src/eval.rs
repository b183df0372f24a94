//! Full-catalog ranking metrics and the tail-probability diagnostic.

use std::io::Write;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::data::SequenceExample;
use crate::model::{ModelError, ModelParams};

/// Default metric cutoffs.
pub const CUTOFFS: [usize; 3] = [5, 10, 20];
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptySplit,
    #[error("target {target} is not a real item of a {num_items}-item catalog")]
    InvalidTarget { target: usize, num_items: usize },
    #[error("the catalog has no tail items")]
    NoTailItems,
    #[error("metrics json: {0}")]
    Json(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 1 + items scoring strictly higher + equal-scoring items with smaller ids.
pub fn rank_of_target(scores: &[f64], target: ItemId) -> Result<usize, EvalError> {
    let st = *scores.get(target.0).ok_or(EvalError::InvalidTarget { target: target.0, num_items: scores.len() })?;
    let ahead = scores.iter().enumerate().filter(|&(i, &s)| s > st || (s == st && i < target.0)).count();
    Ok(1 + ahead)
}

pub fn hr_at(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, n: usize) -> f64 {
    if rank <= n {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CutoffMetrics {
    pub n: usize,
    pub hr: f64,
    pub ndcg: f64,
    /// `None` when no example has a tail target.
    pub tail_hr: Option<f64>,
    pub tail_ndcg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub cutoffs: Vec<CutoffMetrics>,
    pub num_test_users: usize,
    pub num_tail_test_users: usize,
}

fn mean_at(sorted_ranks: &[usize], n: usize, f: fn(usize, usize) -> f64) -> Option<f64> {
    if sorted_ranks.is_empty() {
        return None;
    }
    Some(sorted_ranks.iter().map(|&r| f(r, n)).sum::<f64>() / sorted_ranks.len() as f64)
}

impl MetricsReport {
    /// Aggregates ranks into means. Ranks are summed in sorted order so the
    /// result does not depend on example order.
    pub fn from_ranks(ranks: &[usize], is_tail: &[bool], cutoffs: &[usize]) -> Result<Self, EvalError> {
        if ranks.is_empty() {
            return Err(EvalError::EmptySplit);
        }
        let mut all = ranks.to_vec();
        all.sort_unstable();
        let mut tail: Vec<usize> = ranks.iter().zip(is_tail).filter(|(_, &t)| t).map(|(&r, _)| r).collect();
        tail.sort_unstable();
        let cutoffs = cutoffs
            .iter()
            .map(|&n| CutoffMetrics {
                n,
                hr: mean_at(&all, n, hr_at).unwrap_or(0.0),
                ndcg: mean_at(&all, n, ndcg_at).unwrap_or(0.0),
                tail_hr: mean_at(&tail, n, hr_at),
                tail_ndcg: mean_at(&tail, n, ndcg_at),
            })
            .collect();
        Ok(Self { cutoffs, num_test_users: ranks.len(), num_tail_test_users: tail.len() })
    }

    pub fn at(&self, n: usize) -> Option<&CutoffMetrics> {
        self.cutoffs.iter().find(|c| c.n == n)
    }

    pub fn hr(&self, n: usize) -> Option<f64> {
        self.at(n).map(|c| c.hr)
    }

    pub fn ndcg(&self, n: usize) -> Option<f64> {
        self.at(n).map(|c| c.ndcg)
    }

    pub fn tail_hr(&self, n: usize) -> Option<f64> {
        self.at(n).and_then(|c| c.tail_hr)
    }

    pub fn tail_ndcg(&self, n: usize) -> Option<f64> {
        self.at(n).and_then(|c| c.tail_ndcg)
    }

    /// Flat JSON object with keys `hr@N`, `ndcg@N`, `tail_hr@N`,
    /// `tail_ndcg@N` (null for an empty tail stratum), `num_test_users` and
    /// `num_tail_test_users`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        let num = |v: f64| serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number);
        for c in &self.cutoffs {
            m.insert(format!("hr@{}", c.n), num(c.hr));
            m.insert(format!("ndcg@{}", c.n), num(c.ndcg));
            m.insert(format!("tail_hr@{}", c.n), c.tail_hr.map_or(Value::Null, num));
            m.insert(format!("tail_ndcg@{}", c.n), c.tail_ndcg.map_or(Value::Null, num));
        }
        m.insert("num_test_users".into(), self.num_test_users.into());
        m.insert("num_tail_test_users".into(), self.num_tail_test_users.into());
        Value::Object(m)
    }

    pub fn from_json(v: &Value) -> Result<Self, EvalError> {
        let obj = v.as_object().ok_or_else(|| EvalError::Json("expected an object".into()))?;
        let count = |k: &str| {
            obj.get(k)
                .and_then(Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| EvalError::Json(format!("missing {k}")))
        };
        let mut ns: Vec<usize> =
            obj.keys().filter_map(|k| k.strip_prefix("hr@")).filter_map(|n| n.parse().ok()).collect();
        ns.sort_unstable();
        let mut cutoffs = Vec::new();
        for n in ns {
            let get = |k: String| obj.get(&k).and_then(Value::as_f64);
            cutoffs.push(CutoffMetrics {
                n,
                hr: get(format!("hr@{n}")).ok_or_else(|| EvalError::Json(format!("bad hr@{n}")))?,
                ndcg: get(format!("ndcg@{n}")).ok_or_else(|| EvalError::Json(format!("bad ndcg@{n}")))?,
                tail_hr: get(format!("tail_hr@{n}")),
                tail_ndcg: get(format!("tail_ndcg@{n}")),
            });
        }
        Ok(Self {
            cutoffs,
            num_test_users: count("num_test_users")?,
            num_tail_test_users: count("num_tail_test_users")?,
        })
    }
}

/// Scores every example in eval mode, in batches.
fn for_each_scored<F>(params: &ModelParams, examples: &[SequenceExample], mut f: F) -> Result<(), EvalError>
where
    F: FnMut(&SequenceExample, &[f64]) -> Result<(), EvalError>,
{
    for chunk in examples.chunks(EVAL_BATCH) {
        let hist: Vec<&[ItemId]> = chunk.iter().map(|e| e.history.as_slice()).collect();
        let scores = params.score_histories(&hist)?;
        for (ex, s) in chunk.iter().zip(&scores) {
            f(ex, s)?;
        }
    }
    Ok(())
}

/// Ranks each example's target among all items (history items included)
/// and reports means overall and over tail targets.
pub fn evaluate(
    params: &ModelParams,
    examples: &[SequenceExample],
    catalog: &Catalog,
    cutoffs: &[usize],
) -> Result<MetricsReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut ranks = Vec::with_capacity(examples.len());
    let mut tail = Vec::with_capacity(examples.len());
    for_each_scored(params, examples, |ex, s| {
        ranks.push(rank_of_target(s, ex.target)?);
        let is_tail = catalog
            .is_tail(ex.target)
            .map_err(|_| EvalError::InvalidTarget { target: ex.target.0, num_items: catalog.num_items() })?;
        tail.push(is_tail);
        Ok(())
    })?;
    MetricsReport::from_ranks(&ranks, &tail, cutoffs)
}

/// Mean softmax probability over tail items minus the mean over all items
/// (which is exactly `1/n`).
pub fn tail_prob_delta(scores: &[f64], catalog: &Catalog) -> Result<f64, EvalError> {
    let n_tail = catalog.num_tail();
    if n_tail == 0 {
        return Err(EvalError::NoTailItems);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let tail_mass: f64 = exps.iter().zip(catalog.tail_flags()).filter(|(_, &t)| t).map(|(e, _)| e / z).sum();
    Ok(tail_mass / n_tail as f64 - 1.0 / scores.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbDiagnostics {
    pub deltas: Vec<f64>,
    /// `bins + 1` edges spanning the attainable range
    /// `[-1/n, 1/|tail| - 1/n]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean_delta: f64,
}

impl ProbDiagnostics {
    /// `bin_left,bin_right,count` rows, then a `mean_delta,<value>` line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_left,bin_right,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c)?;
        }
        writeln!(out, "mean_delta,{}", self.mean_delta)
    }
}

pub fn prob_diagnostics(
    params: &ModelParams,
    examples: &[SequenceExample],
    catalog: &Catalog,
    bins: usize,
) -> Result<ProbDiagnostics, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut deltas = Vec::with_capacity(examples.len());
    for_each_scored(params, examples, |_, s| {
        deltas.push(tail_prob_delta(s, catalog)?);
        Ok(())
    })?;
    Ok(histogram(deltas, catalog, bins.max(1)))
}

fn histogram(deltas: Vec<f64>, catalog: &Catalog, bins: usize) -> ProbDiagnostics {
    let n = catalog.num_items() as f64;
    let lo = -1.0 / n;
    let hi = 1.0 / catalog.num_tail() as f64 - 1.0 / n;
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &d in &deltas {
        let i = if width > 0.0 { ((d - lo) / width).floor() } else { 0.0 };
        counts[(i.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    ProbDiagnostics { deltas, bin_edges, counts, mean_delta }
}
