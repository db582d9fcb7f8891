//! The entity tagger: predicts diagonal table labels word by word, left to
//! right. Each step classifies a concatenation of the current word vector,
//! the previous label's embedding, and a max-pool over the previous span's
//! word vectors; training is teacher-forced on gold labels and spans.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelSchema, OUTSIDE_ID};
use crate::math::{argmax, cross_entropy_from_logits, softmax};
use crate::table::{span_index, spans_from_bilou, DecodePolicy, Span, SpanIndex, SpanTracker};
use crate::LossReduction;

#[derive(Debug, Error)]
pub enum NerError {
    #[error("feature has {got} dims but the classifier expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("position {i} out of range for sentence of {n} words")]
    IndexOutOfRange { i: usize, n: usize },
    #[error("label id {0} out of range")]
    UnknownLabel(usize),
}

/// Ablation switches for the two history features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerFlags {
    pub use_label_feature: bool,
    pub use_span_feature: bool,
}

impl Default for NerFlags {
    fn default() -> Self {
        NerFlags { use_label_feature: true, use_span_feature: true }
    }
}

impl NerFlags {
    pub fn feature_dim(&self, d_model: usize, d_label: usize) -> usize {
        d_model
            + if self.use_label_feature { d_label } else { 0 }
            + if self.use_span_feature { d_model } else { 0 }
    }
}

/// Classifier weights plus the label embedding table (shared with the
/// relation head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub label_emb: Array2<f64>,
}

impl NerParams {
    pub fn init(
        num_labels: usize,
        d_model: usize,
        d_label: usize,
        flags: NerFlags,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_ent = flags.feature_dim(d_model, d_label);
        let bound = 1.0 / (d_ent as f64).sqrt();
        NerParams {
            w: Array2::from_shape_fn((num_labels, d_ent), |_| rng.gen_range(-bound..bound)),
            b: Array1::zeros(num_labels),
            label_emb: Array2::from_shape_fn((num_labels, d_label), |_| rng.gen_range(-0.1..0.1)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NerParams {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            label_emb: Array2::zeros(self.label_emb.raw_dim()),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.w.dim().0
    }

    pub fn d_label(&self) -> usize {
        self.label_emb.dim().1
    }
}

/// Word vectors for one sentence plus the start-marker vector that stands
/// in for the word before position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub words: Array2<f64>,
    pub start: Array1<f64>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.words.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.words.dim().1
    }
}

/// Multiplicative dropout masks (inverted scaling baked in) for the three
/// sites the tagger and relation head drop: the current word vector, the
/// pooled previous-span feature, and the relation-side span feature.
#[derive(Debug, Clone)]
pub struct DropoutPlan {
    pub word: Array2<f64>,
    pub span: Array2<f64>,
    pub z: Array2<f64>,
}

impl DropoutPlan {
    pub fn sample(n: usize, d_model: usize, rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut mask = || {
            Array2::from_shape_fn((n, d_model), |_| {
                if rng.gen_range(0.0..1.0) < rate { 0.0 } else { 1.0 / (1.0 - rate) }
            })
        };
        DropoutPlan { word: mask(), span: mask(), z: mask() }
    }
}

/// Which rows fed the previous-span pool and which row won per coordinate.
#[derive(Debug, Clone)]
struct SpanPoolCache {
    rows: Vec<isize>, // word indices; -1 is the start marker
    winners: Vec<usize>,
}

fn pool_previous_span(
    sent: &EncodedSentence,
    i: usize,
    prev_first: usize,
) -> (Array1<f64>, SpanPoolCache) {
    let d = sent.d_model();
    if i == 0 {
        return (
            sent.start.clone(),
            SpanPoolCache { rows: vec![-1], winners: vec![0; d] },
        );
    }
    let rows: Vec<isize> = (prev_first..=i - 1).map(|r| r as isize).collect();
    let mut vals = sent.words.row(prev_first).to_owned();
    let mut winners = vec![0usize; d];
    for (k, &r) in rows.iter().enumerate().skip(1) {
        for c in 0..d {
            let v = sent.words[[r as usize, c]];
            if v > vals[c] {
                vals[c] = v;
                winners[c] = k;
            }
        }
    }
    (vals, SpanPoolCache { rows, winners })
}

struct FeatureCache {
    h: Array1<f64>,
    prev_label: usize,
    pool: Option<SpanPoolCache>,
}

fn feature_cached(
    sent: &EncodedSentence,
    i: usize,
    prev_label: usize,
    prev_first: usize,
    flags: NerFlags,
    params: &NerParams,
    dropout: Option<&DropoutPlan>,
) -> FeatureCache {
    let d = sent.d_model();
    let d_label = params.d_label();
    let mut h = Array1::zeros(flags.feature_dim(d, d_label));
    let mut word = sent.words.row(i).to_owned();
    if let Some(plan) = dropout {
        word *= &plan.word.row(i);
    }
    h.slice_mut(ndarray::s![0..d]).assign(&word);
    let mut offset = d;
    if flags.use_label_feature {
        h.slice_mut(ndarray::s![offset..offset + d_label])
            .assign(&params.label_emb.row(prev_label));
        offset += d_label;
    }
    let pool = if flags.use_span_feature {
        let (mut pooled, cache) = pool_previous_span(sent, i, prev_first);
        if let Some(plan) = dropout {
            pooled *= &plan.span.row(i);
        }
        h.slice_mut(ndarray::s![offset..offset + d]).assign(&pooled);
        Some(cache)
    } else {
        None
    };
    FeatureCache { h, prev_label, pool }
}

/// The per-step input vector: current word vector, previous label
/// embedding, and max-pool over the previous span, per the flags. At
/// position 0 the previous word is the start marker and the previous
/// label is `O`.
pub fn ner_feature(
    sent: &EncodedSentence,
    i: usize,
    prev_labels: &[usize],
    index: &SpanIndex,
    flags: NerFlags,
    params: &NerParams,
) -> Result<Array1<f64>, NerError> {
    let n = sent.len();
    if i >= n {
        return Err(NerError::IndexOutOfRange { i, n });
    }
    let (prev_label, prev_first) = if i == 0 {
        (OUTSIDE_ID, 0)
    } else {
        (prev_labels[i - 1], index.first[i - 1])
    };
    if prev_label >= params.num_labels() {
        return Err(NerError::UnknownLabel(prev_label));
    }
    Ok(feature_cached(sent, i, prev_label, prev_first, flags, params, None).h)
}

/// Linear-softmax classification of a feature vector into a probability
/// distribution over entity labels.
pub fn ner_step(h: ArrayView1<f64>, params: &NerParams) -> Result<Array1<f64>, NerError> {
    let (_, d_ent) = params.w.dim();
    if h.len() != d_ent {
        return Err(NerError::DimensionMismatch { expected: d_ent, got: h.len() });
    }
    let logits = params.w.dot(&h) + &params.b;
    Ok(softmax(logits.view()))
}

/// Output of the greedy left-to-right decode.
#[derive(Debug, Clone)]
pub struct NerDecode {
    pub labels: Vec<usize>,
    pub spans: Vec<Span>,
    pub index: SpanIndex,
}

/// Greedy decode: each step consumes the model's own previous predictions,
/// with span history tracked online.
pub fn decode_ner(
    sent: &EncodedSentence,
    params: &NerParams,
    flags: NerFlags,
    schema: &LabelSchema,
    policy: DecodePolicy,
) -> Result<NerDecode, NerError> {
    let n = sent.len();
    let mut labels = Vec::with_capacity(n);
    let mut tracker = SpanTracker::new();
    for i in 0..n {
        let (prev_label, prev_first) = if i == 0 {
            (OUTSIDE_ID, 0)
        } else {
            (labels[i - 1], tracker.first(i - 1))
        };
        let feat = feature_cached(sent, i, prev_label, prev_first, flags, params, None);
        let probs = ner_step(feat.h.view(), params)?;
        let label = argmax(probs.view());
        labels.push(label);
        tracker.push(schema.entity_label(label));
    }
    let spans = spans_from_bilou(&labels, schema, policy.bilou_repair);
    let index = span_index(&spans, n).expect("decoded spans are in range");
    Ok(NerDecode { labels, spans, index })
}

/// Teacher-forced loss: features are computed from gold previous labels
/// and gold spans, never from predictions.
pub fn ner_loss(
    sent: &EncodedSentence,
    gold_labels: &[usize],
    gold_index: &SpanIndex,
    params: &NerParams,
    flags: NerFlags,
    reduction: LossReduction,
    dropout: Option<&DropoutPlan>,
) -> Result<f64, NerError> {
    Ok(ner_forward(sent, gold_labels, gold_index, params, flags, reduction, dropout)?.0)
}

struct NerTrainCache {
    per_step: Vec<FeatureCache>,
    probs: Vec<Array1<f64>>,
    scale: f64,
}

fn ner_forward(
    sent: &EncodedSentence,
    gold_labels: &[usize],
    gold_index: &SpanIndex,
    params: &NerParams,
    flags: NerFlags,
    reduction: LossReduction,
    dropout: Option<&DropoutPlan>,
) -> Result<(f64, NerTrainCache), NerError> {
    let n = sent.len();
    assert_eq!(gold_labels.len(), n, "gold labels must cover the sentence");
    let mut per_step = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    let mut loss = 0.0;
    for i in 0..n {
        let (prev_label, prev_first) = if i == 0 {
            (OUTSIDE_ID, 0)
        } else {
            (gold_labels[i - 1], gold_index.first[i - 1])
        };
        if prev_label >= params.num_labels() {
            return Err(NerError::UnknownLabel(prev_label));
        }
        let feat = feature_cached(sent, i, prev_label, prev_first, flags, params, dropout);
        let logits = params.w.dot(&feat.h) + &params.b;
        loss += cross_entropy_from_logits(logits.view(), gold_labels[i]);
        probs.push(softmax(logits.view()));
        per_step.push(feat);
    }
    let scale = match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean => 1.0 / n as f64,
    };
    Ok((loss * scale, NerTrainCache { per_step, probs, scale }))
}

/// Loss plus gradients. Head gradients accumulate into `grads`; gradients
/// with respect to the word vectors and the start marker accumulate into
/// `d_words` / `d_start` for the encoder chain. Everything is scaled by
/// `outer_scale` (the batch weight).
#[allow(clippy::too_many_arguments)]
pub fn ner_loss_backward(
    sent: &EncodedSentence,
    gold_labels: &[usize],
    gold_index: &SpanIndex,
    params: &NerParams,
    flags: NerFlags,
    reduction: LossReduction,
    dropout: Option<&DropoutPlan>,
    outer_scale: f64,
    grads: &mut NerParams,
    d_words: &mut Array2<f64>,
    d_start: &mut Array1<f64>,
) -> Result<f64, NerError> {
    let (loss, cache) = ner_forward(sent, gold_labels, gold_index, params, flags, reduction, dropout)?;
    let d = sent.d_model();
    let d_label = params.d_label();
    for (i, feat) in cache.per_step.iter().enumerate() {
        let mut dlogits = cache.probs[i].clone();
        dlogits[gold_labels[i]] -= 1.0;
        dlogits *= cache.scale * outer_scale;

        // w: |E| x d_ent, h: d_ent
        grads.w += &dlogits
            .view()
            .insert_axis(Axis(1))
            .dot(&feat.h.view().insert_axis(Axis(0)));
        grads.b += &dlogits;
        let dh = params.w.t().dot(&dlogits);

        let mut dword = dh.slice(ndarray::s![0..d]).to_owned();
        if let Some(plan) = dropout {
            dword *= &plan.word.row(i);
        }
        {
            let mut row = d_words.row_mut(i);
            row += &dword;
        }

        let mut offset = d;
        if flags.use_label_feature {
            let mut lrow = grads.label_emb.row_mut(feat.prev_label);
            lrow += &dh.slice(ndarray::s![offset..offset + d_label]);
            offset += d_label;
        }
        if let Some(pool) = &feat.pool {
            let mut dspan = dh.slice(ndarray::s![offset..offset + d]).to_owned();
            if let Some(plan) = dropout {
                dspan *= &plan.span.row(i);
            }
            for c in 0..d {
                match pool.rows[pool.winners[c]] {
                    -1 => d_start[c] += dspan[c],
                    r => d_words[[r as usize, c]] += dspan[c],
                }
            }
        }
    }
    Ok(loss)
}
