//! Cross-entropy, the listwise temperature-softmax preference loss, the
//! pairwise DPO baseline, Bradley-Terry probabilities and batch reweighting.
//!
//! Every loss has a graph form that works on a `[batch, num_items]` score
//! matrix and returns per-example values `[batch, 1]`, plus an `f64` helper
//! for a single score vector that runs the same graph code.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::engine::{sigmoid, EngineError, Graph, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),
    #[error("negative item {0} appears more than once")]
    DuplicateNegative(ItemId),
    #[error("target item {0} is among its own negatives")]
    TargetInNegatives(ItemId),
    #[error("target {target} is not a real item of a {num_items}-item catalog")]
    InvalidTarget { target: usize, num_items: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("dpo beta must be positive, got {0}")]
    BetaNonPositive(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the listwise term.
    pub lambda: f64,
    /// Temperature of the listwise softmax.
    pub tau: f64,
    pub alpha_tail: f64,
    pub alpha_head: f64,
    pub dpo_beta: f64,
    /// When false every example in a batch gets weight `1/m`.
    pub reweight: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5, tau: 0.1, alpha_tail: 1.0, alpha_head: 0.0, dpo_beta: 1.0, reweight: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::TemperatureNonPositive(self.tau));
        }
        if !(self.dpo_beta > 0.0) {
            return Err(LossError::BetaNonPositive(self.dpo_beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::NonFinite(format!("lambda = {}", self.lambda)));
        }
        if !(self.alpha_tail.is_finite() && self.alpha_head.is_finite()) {
            return Err(LossError::NonFinite("reweighting logits".into()));
        }
        Ok(())
    }
}

fn check_targets(targets: &[ItemId], num_items: usize) -> Result<(), LossError> {
    match targets.iter().find(|t| t.0 >= num_items) {
        Some(t) => Err(LossError::InvalidTarget { target: t.0, num_items }),
        None => Ok(()),
    }
}

/// Checks the negatives of one example: distinct, real items, target excluded.
pub fn validate_negatives(target: ItemId, negatives: &[ItemId], num_items: usize) -> Result<(), LossError> {
    let mut seen = HashSet::with_capacity(negatives.len());
    for &n in negatives {
        if n.0 >= num_items {
            return Err(LossError::InvalidTarget { target: n.0, num_items });
        }
        if n == target {
            return Err(LossError::TargetInNegatives(target));
        }
        if !seen.insert(n) {
            return Err(LossError::DuplicateNegative(n));
        }
    }
    Ok(())
}

fn batch_shape(g: &Graph, scores: Var, rows: usize) -> Result<usize, LossError> {
    let s = g.shape(scores);
    if s.len() != 2 || s[0] != rows {
        return Err(EngineError::ShapeMismatch {
            node: "loss".into(),
            detail: format!("scores {s:?} for a batch of {rows}"),
        }
        .into());
    }
    if rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    Ok(s[1])
}

/// Per-example full-catalog cross-entropy `lse(s) - s_target`, `[batch, 1]`.
pub fn ce_loss_rows(g: &mut Graph, scores: Var, targets: &[ItemId]) -> Result<Var, LossError> {
    let n = batch_shape(g, scores, targets.len())?;
    check_targets(targets, n)?;
    let lse = g.log_sum_exp_rows(scores)?;
    let idx: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let picked = g.gather(scores, &idx, 1)?;
    Ok(g.sub(lse, picked)?)
}

/// Per-example listwise loss over the target and its `K` negatives:
/// `lse([s_w, s_1..s_K] / tau) - s_w / tau`, `[batch, 1]`. Every example
/// must have the same number of negatives; with none the loss is exactly 0.
pub fn lpo_loss_rows(
    g: &mut Graph,
    scores: Var,
    targets: &[ItemId],
    negatives: &[Vec<ItemId>],
    tau: f64,
) -> Result<Var, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::TemperatureNonPositive(tau));
    }
    let n = batch_shape(g, scores, targets.len())?;
    check_targets(targets, n)?;
    if negatives.len() != targets.len() {
        return Err(EngineError::InvalidArgument(format!(
            "{} negative sets for {} targets",
            negatives.len(),
            targets.len()
        ))
        .into());
    }
    let k = negatives.first().map_or(0, |v| v.len());
    let mut idx = Vec::with_capacity(targets.len() * (k + 1));
    for (t, negs) in targets.iter().zip(negatives) {
        if negs.len() != k {
            return Err(EngineError::InvalidArgument("negative sets differ in size".into()).into());
        }
        validate_negatives(*t, negs, n)?;
        idx.push(t.0);
        idx.extend(negs.iter().map(|v| v.0));
    }
    if k == 0 {
        return Ok(g.constant(Tensor::zeros(&[targets.len(), 1])));
    }
    let cand = g.gather(scores, &idx, k + 1)?;
    let cand = g.scale(cand, 1.0 / tau);
    let lse = g.log_sum_exp_rows(cand)?;
    let first: Vec<usize> = vec![0; targets.len()];
    let pos = g.gather(cand, &first, 1)?;
    Ok(g.sub(lse, pos)?)
}

/// `-log sigmoid(z)` computed as `log(1 + exp(-z))` via a two-term
/// log-sum-exp, so it is stable for either sign of `z`.
pub fn neg_log_sigmoid(g: &mut Graph, z: Var) -> Result<Var, LossError> {
    let mut shape = g.shape(z).to_vec();
    if shape.is_empty() {
        return Err(EngineError::InvalidArgument("neg_log_sigmoid expects at least 1-d input".into()).into());
    }
    let last = shape.len() - 1;
    if shape[last] != 1 {
        shape.push(1);
    }
    let z = g.reshape(z, &shape)?;
    let zero = g.constant(Tensor::zeros(&shape));
    let minus = g.scale(z, -1.0);
    let both = g.concat(&[zero, minus], shape.len() - 1)?;
    Ok(g.log_sum_exp_rows(both)?)
}

/// Elementwise `-log sigmoid(beta * ((pw - rw) - (pl - rl)))` over matching
/// shapes of policy and reference log-probabilities.
pub fn dpo_loss_terms(
    g: &mut Graph,
    policy_w: Var,
    policy_l: Var,
    ref_w: Var,
    ref_l: Var,
    beta: f64,
) -> Result<Var, LossError> {
    if !(beta > 0.0) {
        return Err(LossError::BetaNonPositive(beta));
    }
    let win = g.sub(policy_w, ref_w)?;
    let lose = g.sub(policy_l, ref_l)?;
    let margin = g.sub(win, lose)?;
    let z = g.scale(margin, beta);
    neg_log_sigmoid(g, z)
}

/// Batch softmax of per-example logits: `alpha_tail` for tail targets and
/// `alpha_head` for head targets.
pub fn reweight(
    targets: &[ItemId],
    catalog: &Catalog,
    alpha_tail: f64,
    alpha_head: f64,
) -> Result<Vec<f64>, LossError> {
    if targets.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut logits = Vec::with_capacity(targets.len());
    for t in targets {
        let tail = catalog
            .is_tail(*t)
            .map_err(|_| LossError::InvalidTarget { target: t.0, num_items: catalog.num_items() })?;
        logits.push(if tail { alpha_tail } else { alpha_head });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Example weights for a batch under `config`: the tail/head softmax when
/// reweighting is on, otherwise uniform.
pub fn batch_weights(targets: &[ItemId], catalog: &Catalog, config: &LossConfig) -> Result<Vec<f64>, LossError> {
    if config.reweight {
        reweight(targets, catalog, config.alpha_tail, config.alpha_head)
    } else if targets.is_empty() {
        Err(LossError::EmptyBatch)
    } else {
        Ok(vec![1.0 / targets.len() as f64; targets.len()])
    }
}

/// `sum_i w_i * (ce_i + lambda * lpo_i)` as a scalar.
pub fn joint_loss(
    g: &mut Graph,
    scores: Var,
    targets: &[ItemId],
    negatives: &[Vec<ItemId>],
    weights: &[f64],
    lambda: f64,
    tau: f64,
) -> Result<Var, LossError> {
    if weights.len() != targets.len() {
        return Err(EngineError::InvalidArgument("one weight per example".into()).into());
    }
    let ce = ce_loss_rows(g, scores, targets)?;
    let lpo = lpo_loss_rows(g, scores, targets, negatives, tau)?;
    let lpo = g.scale(lpo, lambda);
    let per = g.add(ce, lpo)?;
    weighted_sum(g, per, weights)
}

/// `sum_i w_i * x_i` for a `[batch, 1]` column.
pub fn weighted_sum(g: &mut Graph, per_example: Var, weights: &[f64]) -> Result<Var, LossError> {
    let w = g.constant(Tensor::new(vec![weights.len(), 1], weights.to_vec())?);
    let prod = g.mul(per_example, w)?;
    Ok(g.reduce_sum(prod))
}

fn scores_row(g: &mut Graph, scores: &[f64]) -> Result<Var, LossError> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LossError::NonFinite("scores".into()));
    }
    Ok(g.constant(Tensor::matrix(1, scores.len(), scores.to_vec())?))
}

/// Cross-entropy of one score vector.
pub fn ce_loss(scores: &[f64], target: ItemId) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let s = scores_row(&mut g, scores)?;
    let l = ce_loss_rows(&mut g, s, &[target])?;
    Ok(g.value(l).data()[0])
}

/// Listwise loss of one score vector.
pub fn lpo_loss(scores: &[f64], target: ItemId, negatives: &[ItemId], tau: f64) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let s = scores_row(&mut g, scores)?;
    let l = lpo_loss_rows(&mut g, s, &[target], &[negatives.to_vec()], tau)?;
    Ok(g.value(l).data()[0])
}

/// Closed-form derivative of the listwise loss with respect to the target
/// score: `(softmax_w - 1) / tau` over the candidate set.
pub fn lpo_grad_wrt_target(scores: &[f64], target: ItemId, negatives: &[ItemId], tau: f64) -> Result<f64, LossError> {
    if !(tau > 0.0) {
        return Err(LossError::TemperatureNonPositive(tau));
    }
    check_targets(&[target], scores.len())?;
    validate_negatives(target, negatives, scores.len())?;
    let sw = scores[target.0] / tau;
    let max = negatives.iter().map(|n| scores[n.0] / tau).fold(sw, f64::max);
    let z: f64 = (sw - max).exp() + negatives.iter().map(|n| (scores[n.0] / tau - max).exp()).sum::<f64>();
    let p = (sw - max).exp() / z;
    Ok((p - 1.0) / tau)
}

/// `-log sigmoid(beta * ((pw - rw) - (pl - rl)))` on log-probability scalars.
pub fn dpo_loss(policy_w: f64, policy_l: f64, ref_w: f64, ref_l: f64, beta: f64) -> Result<f64, LossError> {
    if [policy_w, policy_l, ref_w, ref_l, beta].iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("dpo inputs".into()));
    }
    let mut g = Graph::new();
    let mut c = |v: f64| g.constant(Tensor::vector(vec![v]));
    let (pw, pl, rw, rl) = (c(policy_w), c(policy_l), c(ref_w), c(ref_l));
    let l = dpo_loss_terms(&mut g, pw, pl, rw, rl, beta)?;
    Ok(g.value(l).data()[0])
}

/// `sigmoid(r_w - r_l)`.
pub fn bt_pairwise_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// `prod_l sigmoid(r_w - r_l)`; 1 for an empty list.
pub fn bt_listwise_prob(r_w: f64, r_list: &[f64]) -> f64 {
    r_list.iter().map(|&r| sigmoid(r_w - r)).product()
}

/// The softmax-form bound `1 / (1 + sum_l exp(r_l - r_w))` that the product
/// of pairwise probabilities stays strictly below.
pub fn listwise_upper_bound(r_w: f64, r_list: &[f64]) -> f64 {
    1.0 / (1.0 + r_list.iter().map(|&r| (r - r_w).exp()).sum::<f64>())
}
