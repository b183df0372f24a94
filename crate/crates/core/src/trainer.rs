//! Mini-batch training with Adam, linear warm-up, per-batch negative
//! sampling and tail reweighting, plus a frozen-reference DPO mode.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, ItemId};
use crate::data::{DatasetSplits, SequenceExample};
use crate::engine::{EngineError, Graph, Tensor, Var};
use crate::eval::{evaluate, EvalError};
use crate::losses::{self, LossConfig, LossError};
use crate::model::{
    encode, init_params, score_all, BoundParams, EncodeOptions, ModelDims, ModelError, ModelParams, NoDropout,
};
use crate::sampler::{sample_negatives, SamplerError, SamplingStrategy};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("warm-up ratio must lie in [0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("non-finite gradient in {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no training examples")]
    EmptySplit,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Full-catalog cross-entropy only.
    Ce,
    /// Cross-entropy plus the listwise term over sampled negatives.
    CeLpo,
    /// Pairwise DPO against a frozen cross-entropy reference, averaged
    /// over the sampled negatives.
    Dpo,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::CeLpo => "ce_lpo",
            LossKind::Dpo => "dpo",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [LossKind::Ce, LossKind::CeLpo, LossKind::Dpo]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub dropout: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub loss_config: LossConfig,
    pub sampler: SamplingStrategy,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 20,
            batch_size: 128,
            warmup_ratio: 0.1,
            dropout: 0.2,
            seed: 0,
            loss: LossKind::CeLpo,
            loss_config: LossConfig::default(),
            sampler: SamplingStrategy::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::InvalidRatio(self.warmup_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        self.loss_config.validate()?;
        self.sampler.validate()?;
        Ok(())
    }
}

/// Linear ramp from 0 to `base_lr` over the first
/// `ceil(warmup_ratio * total_steps)` steps, then constant.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64, TrainError> {
    if !(0.0..=1.0).contains(&warmup_ratio) {
        return Err(TrainError::InvalidRatio(warmup_ratio));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step >= warmup {
        Ok(base_lr)
    } else {
        Ok(base_lr * step as f64 / warmup as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. The padding embedding row is reset to
/// zero afterwards.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<(), TrainError> {
    let names = params.names();
    if grads.len() != names.len() {
        return Err(TrainError::InvalidConfig(format!("{} gradients for {} tensors", grads.len(), names.len())));
    }
    for (g, name) in grads.iter().zip(&names) {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { param: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.shape() != g.shape() {
            return Err(TrainError::InvalidConfig(format!("gradient shape {:?} for {:?}", g.shape(), p.shape())));
        }
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
        }
    }
    let pad = params.dims.num_items;
    params.item_embedding.row_mut(pad).fill(0.0);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,loss,val_hr10,val_ndcg10,seconds`, one row per epoch.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,loss,val_hr10,val_ndcg10,seconds")?;
        for r in &self.epochs {
            writeln!(out, "{},{},{},{},{:.3}", r.epoch, r.loss, r.val_hr10, r.val_ndcg10, r.seconds)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Parameters after the epoch with the highest validation NDCG@10 (the
    /// earliest such epoch on ties).
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

/// Derives an independent rng for one (epoch, batch, purpose) triple.
fn derived_rng(seed: u64, epoch: usize, batch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ ((batch as u64) << 4) ^ purpose);
    rng
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SAMPLER: u64 = 3;

/// Visiting order of the training examples in `epoch`.
pub fn epoch_order(num_examples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_examples).collect();
    order.shuffle(&mut derived_rng(seed, epoch, 0, STREAM_SHUFFLE));
    order
}

/// Inputs to one mini-batch objective besides the parameters.
pub struct BatchContext<'a> {
    pub catalog: &'a Catalog,
    pub config: &'a TrainConfig,
    /// Frozen reference, required for [`LossKind::Dpo`].
    pub reference: Option<&'a ModelParams>,
}

/// Records the training objective of one mini-batch in `g` and returns the
/// scalar loss. Negatives are drawn from the live (detached) scores.
pub fn batch_objective<R1, R2>(
    g: &mut Graph,
    bound: &BoundParams,
    batch: &[&SequenceExample],
    ctx: &BatchContext<'_>,
    dropout_rng: &mut R1,
    sampler_rng: &mut R2,
) -> Result<Var, TrainError>
where
    R1: rand::Rng + ?Sized,
    R2: rand::Rng + ?Sized,
{
    let cfg = ctx.config;
    let hist: Vec<&[ItemId]> = batch.iter().map(|e| e.history.as_slice()).collect();
    let targets: Vec<ItemId> = batch.iter().map(|e| e.target).collect();
    let opts = EncodeOptions { dropout: cfg.dropout, train: true };
    let h = encode(g, bound, &hist, opts, dropout_rng)?;
    let scores = score_all(g, bound, h)?;
    let weights = losses::batch_weights(&targets, ctx.catalog, &cfg.loss_config)?;

    let draw_negatives = |g: &Graph, rng: &mut R2| -> Result<Vec<Vec<ItemId>>, TrainError> {
        let n = ctx.catalog.num_items();
        let values = g.value(scores).data();
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| Ok(sample_negatives(&values[i * n..(i + 1) * n], ctx.catalog, t, &cfg.sampler, rng)?))
            .collect()
    };

    match cfg.loss {
        LossKind::Ce => {
            let per = losses::ce_loss_rows(g, scores, &targets)?;
            Ok(losses::weighted_sum(g, per, &weights)?)
        }
        LossKind::CeLpo => {
            let negatives = draw_negatives(g, sampler_rng)?;
            let lc = &cfg.loss_config;
            Ok(losses::joint_loss(g, scores, &targets, &negatives, &weights, lc.lambda, lc.tau)?)
        }
        LossKind::Dpo => {
            let reference = ctx
                .reference
                .ok_or_else(|| TrainError::InvalidConfig("dpo training needs a reference model".into()))?;
            let negatives = draw_negatives(g, sampler_rng)?;
            let k = cfg.sampler.k;
            let mut win_idx = Vec::with_capacity(targets.len() * k);
            let mut lose_idx = Vec::with_capacity(targets.len() * k);
            for (t, negs) in targets.iter().zip(&negatives) {
                win_idx.extend(std::iter::repeat_n(t.0, k));
                lose_idx.extend(negs.iter().map(|v| v.0));
            }
            let lse = g.log_sum_exp_rows(scores)?;
            let logp = g.sub(scores, lse)?;
            let pw = g.gather(logp, &win_idx, k)?;
            let pl = g.gather(logp, &lose_idx, k)?;

            let ref_logp = reference_log_probs(reference, &hist)?;
            let n = ctx.catalog.num_items();
            let pick = |idx: &[usize]| -> Vec<f64> {
                idx.iter().enumerate().map(|(j, &c)| ref_logp[(j / k) * n + c]).collect()
            };
            let rw = g.constant(Tensor::new(vec![targets.len(), k], pick(&win_idx))?);
            let rl = g.constant(Tensor::new(vec![targets.len(), k], pick(&lose_idx))?);
            let terms = losses::dpo_loss_terms(g, pw, pl, rw, rl, cfg.loss_config.dpo_beta)?;
            let terms = g.reshape(terms, &[targets.len(), k])?;
            let sums = g.reduce_sum_last(terms);
            let per = g.scale(sums, 1.0 / k as f64);
            Ok(losses::weighted_sum(g, per, &weights)?)
        }
    }
}

/// Eval-mode full-catalog log-softmax of the reference, row-major.
fn reference_log_probs(reference: &ModelParams, hist: &[&[ItemId]]) -> Result<Vec<f64>, TrainError> {
    let mut g = Graph::new();
    let bound = reference.bind(&mut g, false);
    let h = encode(&mut g, &bound, hist, EncodeOptions::EVAL, &mut NoDropout)?;
    let s = score_all(&mut g, &bound, h)?;
    let lse = g.log_sum_exp_rows(s)?;
    let logp = g.sub(s, lse)?;
    Ok(g.value(logp).data().to_vec())
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }
}

/// Trains from a fresh initialization seeded by `config.seed`. DPO first
/// trains its cross-entropy reference with the same settings.
pub fn train(splits: &DatasetSplits, dims: ModelDims, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let init = init_params(dims, config.seed)?;
    let reference = match config.loss {
        LossKind::Dpo => Some(pretrain_reference(splits, dims, config)?),
        _ => None,
    };
    train_from(splits, init, config, reference.as_ref(), &mut |_, _| Ok(()))
}

/// Cross-entropy training with the same settings; returns the
/// best-validation checkpoint, to be frozen as a DPO reference.
pub fn pretrain_reference(
    splits: &DatasetSplits,
    dims: ModelDims,
    config: &TrainConfig,
) -> Result<ModelParams, TrainError> {
    let mut ce = config.clone();
    ce.loss = LossKind::Ce;
    let init = init_params(dims, ce.seed)?;
    Ok(train_from(splits, init, &ce, None, &mut |_, _| Ok(()))?.best_params)
}

/// The training loop proper, starting from `init`. `on_epoch` sees each
/// epoch's record and the parameters at its end.
pub fn train_from(
    splits: &DatasetSplits,
    init: ModelParams,
    config: &TrainConfig,
    reference: Option<&ModelParams>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &ModelParams) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    if config.loss != LossKind::Ce {
        config.sampler.validate_for(&splits.catalog)?;
    }
    if init.dims.num_items != splits.num_items() {
        return Err(TrainError::InvalidConfig(format!(
            "model has {} items, data has {}",
            init.dims.num_items,
            splits.num_items()
        )));
    }
    let ctx = BatchContext { catalog: &splits.catalog, config, reference };
    let mut params = init;
    let mut adam = AdamState::new(&params);
    let batches_per_epoch = splits.train.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(splits.train.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SequenceExample> = idx.iter().map(|&i| &splits.train[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let mut drop_rng = derived_rng(config.seed, epoch, bi, STREAM_DROPOUT);
            let mut samp_rng = derived_rng(config.seed, epoch, bi, STREAM_SAMPLER);
            let loss = batch_objective(&mut g, &bound, &batch, &ctx, &mut drop_rng, &mut samp_rng)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += value;
            let mut grads = g.backward(loss)?;
            let mut grads: Vec<Tensor> = bound
                .vars()
                .into_iter()
                .zip(params.tensors())
                .map(|(v, t)| grads.take_or_zeros(v, t.shape()))
                .collect();
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, c);
            }
            step += 1;
            let lr = lr_at(step, total_steps, config.learning_rate, config.warmup_ratio)?;
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        let val = evaluate(&params, &splits.validation, &splits.catalog, &[10])?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches_per_epoch as f64,
            val_hr10: val.hr(10).unwrap_or(0.0),
            val_ndcg10: val.ndcg(10).unwrap_or(0.0),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &params)?;
        if best.as_ref().is_none_or(|b| record.val_ndcg10 > b.0) {
            best = Some((record.val_ndcg10, epoch, params.clone()));
        }
        history.epochs.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome { final_params: params, best_params, best_epoch, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_splits, generate_synthetic, InteractionRecord, SyntheticSpec};
    use crate::engine::{finite_diff_check, CoordSample};
    use crate::sampler::SamplerKind;

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(0, 100, 1e-3, 0.1).unwrap(), 0.0);
        assert!((lr_at(5, 100, 1e-3, 0.1).unwrap() - 5e-4).abs() < 1e-18);
        for s in [10, 11, 50, 100] {
            assert_eq!(lr_at(s, 100, 1e-3, 0.1).unwrap(), 1e-3);
        }
        assert_eq!(lr_at(0, 100, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(matches!(lr_at(1, 10, 1.0, 1.5), Err(TrainError::InvalidRatio(_))));
    }

    fn tiny_params() -> ModelParams {
        init_params(ModelDims { d: 4, heads: 1, blocks: 1, max_len: 2, num_items: 3 }, 0).unwrap()
    }

    fn grads_like(p: &ModelParams, value: f64) -> Vec<Tensor> {
        p.tensors().iter().map(|t| Tensor::full(t.shape(), value)).collect()
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_gradient_sign() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut grads = grads_like(&p, 1.0);
        grads[1].data_mut()[0] = -3.0;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut st, 0.1).unwrap();
        for (i, (a, b)) in p.tensors().iter().zip(before.tensors()).enumerate() {
            for (j, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if i == 0 && j >= 3 * 4 {
                    continue; // padding row
                }
                let sign = grads[i].data()[j].signum();
                assert!(((x - y) + 0.1 * sign).abs() < 1e-6, "tensor {i}[{j}]: moved {}", x - y);
            }
        }
        assert!(p.item_embedding.row(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let grads = grads_like(&p, 0.0);
        adam_step(&mut p, &grads, &mut st, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = tiny_params();
        let mut grads = grads_like(&p, 0.0);
        grads[3].data_mut()[0] = f64::NAN;
        let err = adam_step(&mut p, &grads, &mut AdamState::new(&tiny_params()), 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { ref param } if param == "block0.w_k"));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(37, 5, 3);
        assert_ne!(o, (0..37).collect::<Vec<_>>());
        assert_ne!(o, epoch_order(37, 5, 4));
        o.sort_unstable();
        assert_eq!(o, (0..37).collect::<Vec<_>>());
    }

    fn toy_splits() -> DatasetSplits {
        let recs = generate_synthetic(&SyntheticSpec {
            num_users: 30,
            num_items: 25,
            interactions_per_user: 8,
            zipf_exponent: 1.0,
            seed: 2,
        })
        .unwrap();
        build_splits(&recs, 5).unwrap()
    }

    fn toy_config(loss: LossKind) -> TrainConfig {
        TrainConfig {
            learning_rate: 5e-3,
            epochs: 2,
            batch_size: 16,
            warmup_ratio: 0.1,
            dropout: 0.1,
            seed: 9,
            loss,
            loss_config: LossConfig::default(),
            sampler: SamplingStrategy { kind: SamplerKind::AdaptiveGumbel, k: 3, gumbel_scale: 1.0 },
            grad_clip: None,
        }
    }

    fn toy_dims(s: &DatasetSplits) -> ModelDims {
        ModelDims { d: 8, heads: 2, blocks: 1, max_len: 5, num_items: s.num_items() }
    }

    #[test]
    fn cross_entropy_training_reduces_loss() {
        let recs: Vec<InteractionRecord> = (0..4)
            .flat_map(|u| {
                (0..7).map(move |t| InteractionRecord::new(format!("u{u}"), format!("i{}", (u + t) % 6), t as i64))
            })
            .collect();
        let s = build_splits(&recs, 5).unwrap();
        assert_eq!(s.train.len(), 16);
        let mut cfg = toy_config(LossKind::Ce);
        cfg.dropout = 0.0;
        cfg.learning_rate = 1e-2;
        cfg.batch_size = 4;
        let out = train(&s, toy_dims(&s), &cfg).unwrap();
        let l = &out.history.epochs;
        assert!(l[1].loss < l[0].loss, "{l:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let s = toy_splits();
        let cfg = toy_config(LossKind::CeLpo);
        let a = train(&s, toy_dims(&s), &cfg).unwrap();
        let b = train(&s, toy_dims(&s), &cfg).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.best_params, b.best_params);
    }

    #[test]
    fn too_many_negatives_fail_before_training() {
        let s = toy_splits();
        let mut cfg = toy_config(LossKind::CeLpo);
        cfg.sampler.k = s.catalog.head().len();
        assert!(matches!(
            train(&s, toy_dims(&s), &cfg),
            Err(TrainError::Sampler(SamplerError::NotEnoughCandidates { .. }))
        ));
    }

    #[test]
    fn losses_stay_finite_at_low_temperature() {
        let s = toy_splits();
        let mut cfg = toy_config(LossKind::CeLpo);
        cfg.epochs = 5;
        cfg.loss_config.tau = 0.1;
        let out = train(&s, toy_dims(&s), &cfg).unwrap();
        assert!(out.history.epochs.iter().all(|r| r.loss.is_finite()));
        assert!(out.final_params.all_finite());
    }

    #[test]
    fn best_checkpoint_has_the_best_validation_score() {
        let s = toy_splits();
        let mut cfg = toy_config(LossKind::Ce);
        cfg.epochs = 4;
        let out = train(&s, toy_dims(&s), &cfg).unwrap();
        let best = evaluate(&out.best_params, &s.validation, &s.catalog, &[10]).unwrap().ndcg(10).unwrap();
        for r in &out.history.epochs {
            assert!(best >= r.val_ndcg10 - 1e-12);
        }
        assert_eq!(best, out.history.epochs[out.best_epoch - 1].val_ndcg10);
    }

    #[test]
    fn dpo_at_the_reference_is_ln2_and_reference_stays_frozen() {
        let s = toy_splits();
        let mut cfg = toy_config(LossKind::Dpo);
        cfg.dropout = 0.0;
        let reference = pretrain_reference(&s, toy_dims(&s), &cfg).unwrap();
        let frozen = reference.clone();
        let ctx = BatchContext { catalog: &s.catalog, config: &cfg, reference: Some(&reference) };
        let batch: Vec<&SequenceExample> = s.train.iter().take(8).collect();
        let mut g = Graph::new();
        let bound = reference.bind(&mut g, true);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let loss = batch_objective(&mut g, &bound, &batch, &ctx, &mut r1, &mut r2).unwrap();
        // Weights sum to one, so the weighted mean of ln 2 terms is ln 2.
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-12);

        let out =
            train_from(&s, init_params(toy_dims(&s), 1).unwrap(), &cfg, Some(&reference), &mut |_, _| Ok(())).unwrap();
        assert!(out.final_params.all_finite());
        assert_eq!(reference, frozen);
    }

    #[test]
    fn joint_objective_gradient_over_all_parameters() {
        let recs = generate_synthetic(&SyntheticSpec {
            num_users: 40,
            num_items: 50,
            interactions_per_user: 9,
            zipf_exponent: 1.0,
            seed: 5,
        })
        .unwrap();
        let s = build_splits(&recs, 5).unwrap();
        let dims = ModelDims { d: 8, heads: 2, blocks: 1, max_len: 5, num_items: s.num_items() };
        let mut cfg = toy_config(LossKind::CeLpo);
        cfg.dropout = 0.0;
        let params = init_params(dims, 17).unwrap();
        let batch: Vec<&SequenceExample> = s.train.iter().step_by(7).take(4).collect();
        let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let check = finite_diff_check(
            |g, vars| {
                let bound = BoundParams::from_vars(dims, vars).unwrap();
                let ctx = BatchContext { catalog: &s.catalog, config: &cfg, reference: None };
                let mut r1 = ChaCha8Rng::seed_from_u64(0);
                let mut r2 = ChaCha8Rng::seed_from_u64(42);
                batch_objective(g, &bound, &batch, &ctx, &mut r1, &mut r2)
                    .map_err(|e| EngineError::InvalidArgument(e.to_string()))
            },
            &tensors,
            1e-5,
            CoordSample::Random { count: 500, seed: 1 },
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn history_csv_format() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, loss: 2.5, val_hr10: 0.1, val_ndcg10: 0.05, seconds: 1.25 }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss,val_hr10,val_ndcg10,seconds\n1,2.5,0.1,0.05,1.250\n");
    }
}
