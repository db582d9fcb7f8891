//! Joint optimization of the encoder and both heads: decoupled-weight-decay
//! Adam with two parameter groups, a linear-warmup/cosine-decay schedule,
//! teacher forcing throughout, and a finite-difference gradient checker.

use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::eval::{entity_metrics, relation_metrics, Criterion, EvalError, Metrics};
use crate::model::{Model, ModelError, ModelGrads, ParamGroup};
use crate::ner::DropoutPlan;
use crate::table::{resolve_spans, resolve_triples};
use crate::LossReduction;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("step {step} is outside the schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("bad training configuration: {0}")]
    BadConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub dropout: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_encoder: 5e-5,
            lr_heads: 1e-3,
            dropout: 0.3,
            warmup_fraction: 0.2,
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
            loss_reduction: LossReduction::Sum,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::BadConfig(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_heads", self.lr_heads)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(TrainError::BadConfig(format!("{name} = {lr} is not a valid rate")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// The learning-rate schedule: linear from 0 to `base_lr` over the first
/// `warmup_fraction` of `total_steps`, then cosine decay to 0.
pub fn lr_at(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_fraction: f64,
) -> Result<f64, TrainError> {
    if step > total_steps || total_steps == 0 {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    let warm = warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < warm {
        return Ok(base_lr * s / warm);
    }
    let tail = total_steps as f64 - warm;
    let t = if tail > 0.0 { (s - warm) / tail } else { 0.0 };
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Decoupled-weight-decay Adam over the model's named parameter blocks,
/// with separate base rates for the encoder and head groups.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    groups: Vec<ParamGroup>,
}

impl AdamW {
    pub fn new(model: &mut Model, weight_decay: f64) -> Self {
        let blocks = model.param_blocks_mut();
        let m = blocks.iter().map(|b| ArrayD::zeros(b.view.raw_dim())).collect();
        let v = blocks.iter().map(|b| ArrayD::zeros(b.view.raw_dim())).collect();
        let groups = blocks.iter().map(|b| b.group).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m, v, groups }
    }

    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &mut ModelGrads,
        lr_encoder: f64,
        lr_heads: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut params = model.param_blocks_mut();
        let grad_blocks = grads.param_blocks_mut();
        assert_eq!(params.len(), grad_blocks.len(), "parameter/gradient layout mismatch");
        for (i, gb) in grad_blocks.into_iter().enumerate() {
            let lr = match self.groups[i] {
                ParamGroup::Encoder => lr_encoder,
                ParamGroup::Heads => lr_heads,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params[i].view;
            for (((pe, ge), me), ve) in
                p.iter_mut().zip(gb.view.iter()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *me = self.beta1 * *me + (1.0 - self.beta1) * ge;
                *ve = self.beta2 * *ve + (1.0 - self.beta2) * ge * ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pe);
            }
        }
    }
}

fn clip_gradients(grads: &mut ModelGrads, max_norm: f64) {
    let mut sq = 0.0;
    for b in grads.param_blocks_mut() {
        sq += b.view.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for mut b in grads.param_blocks_mut() {
            b.view.mapv_inplace(|g| g * scale);
        }
    }
}

/// Entity and relation scores of a model over a sentence list (exact
/// entity matching; relation triples under both boundary and strict
/// criteria).
#[derive(Debug, Clone, Copy)]
pub struct CorpusEval {
    pub entity: Metrics,
    pub relation_boundary: Metrics,
    pub relation_strict: Metrics,
}

pub fn evaluate_corpus(model: &Model, sentences: &[Sentence]) -> Result<CorpusEval, TrainError> {
    let mut gold_spans = Vec::with_capacity(sentences.len());
    let mut gold_triples = Vec::with_capacity(sentences.len());
    let mut pred_spans = Vec::with_capacity(sentences.len());
    let mut pred_triples = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        gold_spans.push(resolve_spans(sentence, &model.schema).map_err(ModelError::from)?);
        gold_triples.push(resolve_triples(sentence, &model.schema).map_err(ModelError::from)?);
        let pred = model.predict_sentence(&sentence.words, false)?;
        pred_spans.push(pred.entities);
        pred_triples.push(pred.relations);
    }
    Ok(CorpusEval {
        entity: entity_metrics(&gold_spans, &pred_spans)?,
        relation_boundary: relation_metrics(&gold_triples, &pred_triples, Criterion::AceBoundary)?,
        relation_strict: relation_metrics(&gold_triples, &pred_triples, Criterion::AceStrict)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_entity_f1: f64,
    pub dev_relation_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Snapshot {
    encoder: Option<crate::encoder::ToyEncoderParams>,
    ner: crate::ner::NerParams,
    re: crate::rel::ReParams,
}

fn capture(model: &Model) -> Snapshot {
    Snapshot {
        encoder: match &model.encoder {
            crate::model::EncoderStack::Toy(t) => Some(t.params.clone()),
            crate::model::EncoderStack::External { .. } => None,
        },
        ner: model.ner.clone(),
        re: model.re.clone(),
    }
}

fn restore(model: &mut Model, snap: Snapshot) {
    if let (crate::model::EncoderStack::Toy(t), Some(p)) = (&mut model.encoder, snap.encoder) {
        t.params = p;
    }
    model.ner = snap.ner;
    model.re = snap.re;
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Teacher-forced joint training. Per-epoch dev metrics are logged and the
/// parameters of the epoch with the best dev entity-plus-relation F1 sum
/// are kept. Deterministic for a fixed seed.
pub fn fit(
    model: &mut Model,
    train: &[Sentence],
    dev: &[Sentence],
    config: &TrainConfig,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(model, config.weight_decay);
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Snapshot)> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sentence> = chunk.iter().map(|&i| &train[i]).collect();
            let plans: Option<Vec<DropoutPlan>> = if config.dropout > 0.0 {
                Some(
                    batch
                        .iter()
                        .map(|s| {
                            DropoutPlan::sample(s.words.len(), model.d_model(), config.dropout, &mut rng)
                        })
                        .collect(),
                )
            } else {
                None
            };
            let mut grads = model.zero_grads();
            let loss =
                model.batch_backward(&batch, plans.as_deref(), config.loss_reduction, &mut grads)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step, loss });
            }
            if let Some(max_norm) = config.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let lr_e = lr_at(step, total_steps, config.lr_encoder, config.warmup_fraction)?;
            let lr_h = lr_at(step, total_steps, config.lr_heads, config.warmup_fraction)?;
            optimizer.step(model, &mut grads, lr_e, lr_h);
            epoch_loss += loss;
            step += 1;
        }
        let eval = evaluate_corpus(model, dev)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / batches_per_epoch as f64,
            dev_entity_f1: eval.entity.f1,
            dev_relation_f1: eval.relation_strict.f1,
        };
        let score = record.dev_entity_f1 + record.dev_relation_f1;
        let improved = best.as_ref().map(|(b, _, _)| score > *b).unwrap_or(true);
        if improved {
            best = Some((score, epoch, capture(model)));
        }
        log.push(record);
    }

    let (_, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(model, snap);
    Ok(FitReport { log, best_epoch })
}

/// Per-block outcome of the finite-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub elements: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub worst_block: String,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Denominator floor for the relative error: central differences of a
/// loss of magnitude ~1e2 carry ~1e-9 of roundoff, so near-zero gradients
/// are compared absolutely against 1e-8 instead of relatively.
const FD_DENOM_FLOOR: f64 = 1e-4;

fn nudge(model: &mut Model, block: usize, element: usize, delta: f64) {
    let mut blocks = model.param_blocks_mut();
    let slice = blocks[block].view.as_slice_mut().expect("parameters are contiguous");
    slice[element] += delta;
}

/// Compare `analytic` gradients against central finite differences of the
/// batch loss, element by element, per named block.
pub fn grad_check_against(
    model: &mut Model,
    batch: &[&Sentence],
    analytic: &mut ModelGrads,
    eps: f64,
    reduction: LossReduction,
) -> Result<GradCheckReport, TrainError> {
    let layout: Vec<(String, usize)> = model
        .param_blocks_mut()
        .iter()
        .map(|b| (b.name.clone(), b.view.len()))
        .collect();
    let mut blocks = Vec::with_capacity(layout.len());
    let mut worst = (0.0f64, String::new());
    for (bi, (name, len)) in layout.iter().enumerate() {
        let mut block_max = 0.0f64;
        for ei in 0..*len {
            nudge(model, bi, ei, eps);
            let plus = model.batch_loss(batch, None, reduction)?;
            nudge(model, bi, ei, -2.0 * eps);
            let minus = model.batch_loss(batch, None, reduction)?;
            nudge(model, bi, ei, eps);
            let fd = (plus - minus) / (2.0 * eps);
            let a = {
                let grad_blocks = analytic.param_blocks_mut();
                grad_blocks[bi].view.as_slice().expect("gradients are contiguous")[ei]
            };
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(FD_DENOM_FLOOR);
            if rel > block_max {
                block_max = rel;
            }
        }
        if block_max > worst.0 {
            worst = (block_max, name.clone());
        }
        blocks.push(BlockReport { name: name.clone(), elements: *len, max_rel_error: block_max });
    }
    Ok(GradCheckReport { blocks, max_rel_error: worst.0, worst_block: worst.1 })
}

/// Analytic-versus-numeric gradient verification of the full joint loss.
pub fn grad_check(
    model: &mut Model,
    batch: &[&Sentence],
    eps: f64,
    reduction: LossReduction,
) -> Result<GradCheckReport, TrainError> {
    let mut grads = model.zero_grads();
    model.batch_backward(batch, None, reduction, &mut grads)?;
    grad_check_against(model, batch, &mut grads, eps, reduction)
}
