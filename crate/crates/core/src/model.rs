//! The assembled model: encoder, tagger, and relation head behind one
//! surface for training, prediction, and checkpointing.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Document, LabelSchema, Sentence};
use crate::encoder::{
    adapter_by_name, segment_document, EncoderCache, EncoderConfig, EncoderError, EncoderKind,
    Segment, SubwordEncoder, ToyEncoder, ToyEncoderParams, Vocab,
};
use crate::ner::{
    decode_ner, ner_loss, ner_loss_backward, DropoutPlan, EncodedSentence, NerError, NerFlags,
    NerParams,
};
use crate::rel::{
    build_qk, decode_relations_history, decode_relations_once, re_backward, re_forward_train,
    rel_input, score_all, span_feature, HistoryParams, Phase, ReError, ReParams, RelScoreTable,
};
use crate::subword::{split_words, splitter_by_name, PoolingMode, SubwordError, SubwordSplitter};
use crate::table::{
    build_gold_table, resolve_spans, span_index, triples_from_cells, DecodePolicy, Span, TableError,
    Triple,
};
use crate::LossReduction;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Ner(#[from] NerError),
    #[error(transparent)]
    Re(#[from] ReError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint version {0} is not supported")]
    Version(u32),
    #[error("history-based decoding requested but the model carries no history parameters")]
    HistoryDisabled,
}

/// Head dimensions and toggles that, together with the encoder config,
/// fix every parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub splitter: String,
    pub d_label: usize,
    pub d_att: usize,
    pub flags: NerFlags,
    pub pooling: PoolingMode,
    pub policy: DecodePolicy,
    /// Allocate parameters for the sequential history-based relation
    /// decoder (experimental; off the default path).
    pub history_variant: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            splitter: "toy".to_string(),
            d_label: 50,
            d_att: 20,
            flags: NerFlags::default(),
            pooling: PoolingMode::Max,
            policy: DecodePolicy::default(),
            history_variant: false,
        }
    }
}

pub enum EncoderStack {
    Toy(ToyEncoder),
    External {
        name: String,
        d_model: usize,
        seed: u64,
        adapter: Box<dyn SubwordEncoder>,
    },
}

impl EncoderStack {
    pub fn d_model(&self) -> usize {
        match self {
            EncoderStack::Toy(t) => t.config.d_model,
            EncoderStack::External { d_model, .. } => *d_model,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, EncoderStack::Toy(_))
    }
}

pub struct Model {
    pub schema: LabelSchema,
    pub encoder: EncoderStack,
    pub splitter_name: String,
    pub ner: NerParams,
    pub re: ReParams,
    pub history: Option<HistoryParams>,
    pub flags: NerFlags,
    pub pooling: PoolingMode,
    pub policy: DecodePolicy,
}

/// Gradient accumulators, shaped like the parameters.
pub struct ModelGrads {
    pub encoder: Option<ToyEncoderParams>,
    pub ner: NerParams,
    pub re: ReParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Heads,
}

/// One named parameter (or gradient) tensor.
pub struct NamedBlock<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub view: ArrayViewMutD<'a, f64>,
}

fn toy_blocks(p: &mut ToyEncoderParams) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
    let mut out = Vec::new();
    out.push(("encoder.tok_emb".to_string(), p.tok_emb.view_mut().into_dyn()));
    out.push(("encoder.pos_emb".to_string(), p.pos_emb.view_mut().into_dyn()));
    for (i, layer) in p.layers.iter_mut().enumerate() {
        out.push((format!("encoder.layer{i}.w_q"), layer.w_q.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.w_k"), layer.w_k.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.w_v"), layer.w_v.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.w_o"), layer.w_o.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.b_q"), layer.b_q.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.b_k"), layer.b_k.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.b_v"), layer.b_v.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.b_o"), layer.b_o.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.w1"), layer.w1.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.b1"), layer.b1.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.w2"), layer.w2.view_mut().into_dyn()));
        out.push((format!("encoder.layer{i}.b2"), layer.b2.view_mut().into_dyn()));
    }
    out
}

fn head_blocks<'a>(
    ner: &'a mut NerParams,
    re: &'a mut ReParams,
) -> Vec<(String, ArrayViewMutD<'a, f64>)> {
    vec![
        ("ner.w".to_string(), ner.w.view_mut().into_dyn()),
        ("ner.b".to_string(), ner.b.view_mut().into_dyn()),
        ("ner.label_emb".to_string(), ner.label_emb.view_mut().into_dyn()),
        ("re.w_q".to_string(), re.w_q.view_mut().into_dyn()),
        ("re.w_k".to_string(), re.w_k.view_mut().into_dyn()),
        ("re.b_q".to_string(), re.b_q.view_mut().into_dyn()),
        ("re.b_k".to_string(), re.b_k.view_mut().into_dyn()),
    ]
}

fn collect_blocks<'a>(
    encoder: Option<&'a mut ToyEncoderParams>,
    ner: &'a mut NerParams,
    re: &'a mut ReParams,
) -> Vec<NamedBlock<'a>> {
    let mut out = Vec::new();
    if let Some(enc) = encoder {
        for (name, view) in toy_blocks(enc) {
            out.push(NamedBlock { name, group: ParamGroup::Encoder, view });
        }
    }
    for (name, view) in head_blocks(ner, re) {
        out.push(NamedBlock { name, group: ParamGroup::Heads, view });
    }
    out
}

impl Model {
    /// Initialize a fresh model: the vocabulary is collected from the
    /// corpus subwords and all parameters are drawn from `rng`.
    pub fn init(
        schema: LabelSchema,
        config: &ModelConfig,
        corpus: &[Document],
        rng: &mut ChaCha8Rng,
    ) -> Result<Model, ModelError> {
        let (encoder, splitter_name, d_model) = match &config.encoder.kind {
            EncoderKind::Toy => {
                let splitter = splitter_by_name(&config.splitter)?;
                let mut subwords = Vec::new();
                for doc in corpus {
                    for sentence in &doc.sentences {
                        let aligned = split_words(&sentence.words, splitter.as_ref())?;
                        subwords.extend(aligned.subwords);
                    }
                }
                let vocab = Vocab::from_subwords(subwords);
                let toy = ToyEncoder::new(config.encoder.clone(), vocab, rng)?;
                let d = toy.config.d_model;
                (EncoderStack::Toy(toy), config.splitter.clone(), d)
            }
            EncoderKind::External(name) => {
                let adapter = adapter_by_name(name, config.encoder.d_model, config.encoder.seed)?;
                let d = adapter.d_model();
                (
                    EncoderStack::External {
                        name: name.clone(),
                        d_model: d,
                        seed: config.encoder.seed,
                        adapter,
                    },
                    config.splitter.clone(),
                    d,
                )
            }
        };
        let num_e = schema.num_entity_labels();
        let num_r = schema.num_relation_labels();
        let ner = NerParams::init(num_e, d_model, config.d_label, config.flags, rng);
        let re = ReParams::init(num_r, d_model + config.d_label, config.d_att, rng);
        let history = if config.history_variant {
            Some(HistoryParams::init(num_r, config.d_label, rng))
        } else {
            None
        };
        Ok(Model {
            schema,
            encoder,
            splitter_name,
            ner,
            re,
            history,
            flags: config.flags,
            pooling: config.pooling,
            policy: config.policy,
        })
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model()
    }

    pub fn splitter(&self) -> Result<Box<dyn SubwordSplitter>, ModelError> {
        match &self.encoder {
            EncoderStack::Toy(_) => Ok(splitter_by_name(&self.splitter_name)?),
            EncoderStack::External { adapter, .. } => Ok(adapter.splitter()),
        }
    }

    fn encode_tokens(&self, tokens: &[String]) -> Result<(Array2<f64>, Option<EncoderCache>), ModelError> {
        match &self.encoder {
            EncoderStack::Toy(toy) => {
                let (rows, cache) = toy.forward_tokens(tokens)?;
                Ok((rows, Some(cache)))
            }
            EncoderStack::External { adapter, .. } => Ok((adapter.encode(tokens)?, None)),
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: match &self.encoder {
                EncoderStack::Toy(toy) => Some(toy.params.zeros_like()),
                EncoderStack::External { .. } => None,
            },
            ner: self.ner.zeros_like(),
            re: self.re.zeros_like(),
        }
    }

    pub fn param_blocks_mut(&mut self) -> Vec<NamedBlock<'_>> {
        let encoder = match &mut self.encoder {
            EncoderStack::Toy(toy) => Some(&mut toy.params),
            EncoderStack::External { .. } => None,
        };
        collect_blocks(encoder, &mut self.ner, &mut self.re)
    }

    /// Pool an encoded segment into per-word vectors for one sentence.
    fn pooled_sentence(
        &self,
        rows: &Array2<f64>,
        word_rows: &[Vec<usize>],
    ) -> (EncodedSentence, Vec<PoolBack>) {
        let d = rows.dim().1;
        let n = word_rows.len();
        let mut words = Array2::zeros((n, d));
        let mut back = Vec::with_capacity(n);
        for (i, wr) in word_rows.iter().enumerate() {
            match self.pooling {
                PoolingMode::First => {
                    words.row_mut(i).assign(&rows.row(wr[0]));
                    back.push(PoolBack::First);
                }
                PoolingMode::Mean => {
                    let mut acc = Array1::<f64>::zeros(d);
                    for &r in wr {
                        acc += &rows.row(r);
                    }
                    acc.mapv_inplace(|x| x / wr.len() as f64);
                    words.row_mut(i).assign(&acc);
                    back.push(PoolBack::Mean);
                }
                PoolingMode::Max => {
                    let mut vals = rows.row(wr[0]).to_owned();
                    let mut winners = vec![0usize; d];
                    for (k, &r) in wr.iter().enumerate().skip(1) {
                        for c in 0..d {
                            if rows[[r, c]] > vals[c] {
                                vals[c] = rows[[r, c]];
                                winners[c] = k;
                            }
                        }
                    }
                    words.row_mut(i).assign(&vals);
                    back.push(PoolBack::Max(winners));
                }
            }
        }
        (
            EncodedSentence { words, start: rows.row(0).to_owned() },
            back,
        )
    }

    /// Encode one sentence on its own segment.
    pub fn embed_sentence(&self, words: &[String]) -> Result<EncodedSentence, ModelError> {
        Ok(self.embed_sentence_cached(words)?.0)
    }

    fn embed_sentence_cached(
        &self,
        words: &[String],
    ) -> Result<(EncodedSentence, EmbedCache), ModelError> {
        let splitter = self.splitter()?;
        let aligned = split_words(words, splitter.as_ref())?;
        let seg = Segment::single(0, &aligned);
        let (rows, enc) = self.encode_tokens(&seg.tokens)?;
        let word_rows = seg.word_rows(0, aligned.num_words());
        let (sent, pool_back) = self.pooled_sentence(&rows, &word_rows);
        let t = seg.tokens.len();
        Ok((sent, EmbedCache { word_rows, pool_back, enc, t }))
    }

    fn embed_backward(
        &self,
        cache: &EmbedCache,
        d_words: &Array2<f64>,
        d_start: &Array1<f64>,
        grads: &mut ModelGrads,
    ) {
        let toy = match &self.encoder {
            EncoderStack::Toy(toy) => toy,
            EncoderStack::External { .. } => return,
        };
        let d = d_words.dim().1;
        let mut d_rows = Array2::zeros((cache.t, d));
        {
            let mut r0 = d_rows.row_mut(0);
            r0 += d_start;
        }
        for (i, wr) in cache.word_rows.iter().enumerate() {
            match &cache.pool_back[i] {
                PoolBack::First => {
                    let mut row = d_rows.row_mut(wr[0]);
                    row += &d_words.row(i);
                }
                PoolBack::Mean => {
                    let s = wr.len() as f64;
                    for &r in wr {
                        for c in 0..d {
                            d_rows[[r, c]] += d_words[[i, c]] / s;
                        }
                    }
                }
                PoolBack::Max(winners) => {
                    for c in 0..d {
                        d_rows[[wr[winners[c]], c]] += d_words[[i, c]];
                    }
                }
            }
        }
        let enc_cache = cache.enc.as_ref().expect("toy encoder keeps its cache");
        let enc_grads = grads.encoder.as_mut().expect("toy encoder grads allocated");
        toy.backward(enc_cache, d_rows, enc_grads);
    }

    /// Teacher-forced joint loss of one sentence.
    pub fn sentence_loss(
        &self,
        sentence: &Sentence,
        reduction: LossReduction,
        dropout: Option<&DropoutPlan>,
    ) -> Result<f64, ModelError> {
        let (sent, _) = self.embed_sentence_cached(&sentence.words)?;
        let gold = build_gold_table(sentence, &self.schema)?;
        let spans = resolve_spans(sentence, &self.schema)?;
        let index = span_index(&spans, sentence.words.len())?;
        let ner = ner_loss(&sent, &gold.diag, &index, &self.ner, self.flags, reduction, dropout)?;
        let re = re_forward_train(&sent, &gold, self.ner.label_emb.view(), &self.re, reduction, dropout)?
            .loss;
        Ok(ner + re)
    }

    /// Mean per-sentence joint loss of a batch.
    pub fn batch_loss(
        &self,
        batch: &[&Sentence],
        plans: Option<&[DropoutPlan]>,
        reduction: LossReduction,
    ) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (k, sentence) in batch.iter().enumerate() {
            let plan = plans.map(|p| &p[k]);
            total += self.sentence_loss(sentence, reduction, plan)?;
        }
        Ok(total / batch.len().max(1) as f64)
    }

    /// Batch loss plus gradients accumulated into `grads`.
    pub fn batch_backward(
        &self,
        batch: &[&Sentence],
        plans: Option<&[DropoutPlan]>,
        reduction: LossReduction,
        grads: &mut ModelGrads,
    ) -> Result<f64, ModelError> {
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut total = 0.0;
        for (k, sentence) in batch.iter().enumerate() {
            let plan = plans.map(|p| &p[k]);
            let n = sentence.words.len();
            let (sent, embed_cache) = self.embed_sentence_cached(&sentence.words)?;
            let gold = build_gold_table(sentence, &self.schema)?;
            let spans = resolve_spans(sentence, &self.schema)?;
            let index = span_index(&spans, n)?;

            let mut d_words = Array2::zeros((n, self.d_model()));
            let mut d_start = Array1::zeros(self.d_model());

            let ner = ner_loss_backward(
                &sent,
                &gold.diag,
                &index,
                &self.ner,
                self.flags,
                reduction,
                plan,
                scale,
                &mut grads.ner,
                &mut d_words,
                &mut d_start,
            )?;
            let re_cache = re_forward_train(
                &sent,
                &gold,
                self.ner.label_emb.view(),
                &self.re,
                reduction,
                plan,
            )?;
            re_backward(
                &re_cache,
                &gold,
                &self.re,
                plan,
                scale,
                &mut grads.re,
                &mut grads.ner.label_emb,
                &mut d_words,
            );
            total += ner + re_cache.loss;

            self.embed_backward(&embed_cache, &d_words, &d_start, grads);
        }
        Ok(total * scale)
    }

    /// Full pipeline for one already-encoded sentence: greedy tagging,
    /// relation scoring over the predicted labels and spans, cell argmax,
    /// and span-pair aggregation into triples.
    pub fn predict_encoded(
        &self,
        sent: &EncodedSentence,
        keep_cells: bool,
        use_history: bool,
    ) -> Result<SentencePrediction, ModelError> {
        let decode = decode_ner(sent, &self.ner, self.flags, &self.schema, self.policy)?;
        let n = sent.len();
        let d_rel = self.re.d_rel();
        let mut h = Array2::zeros((n, d_rel));
        for i in 0..n {
            let z = span_feature(sent, i, &decode.index, Phase::Predict);
            let hi = rel_input(z.view(), decode.labels[i], self.ner.label_emb.view())?;
            h.row_mut(i).assign(&hi);
        }
        let (q, k) = build_qk(h.view(), &self.re)?;
        let table = score_all(&q, &k);
        let cells = if use_history {
            let hist = self.history.as_ref().ok_or(ModelError::HistoryDisabled)?;
            decode_relations_history(&q, &k, hist)
        } else {
            decode_relations_once(&table)
        };
        let relations =
            triples_from_cells(&cells, &decode.spans, &self.schema, self.policy.rel_aggregation);
        Ok(SentencePrediction {
            labels: decode.labels,
            entities: decode.spans,
            relations,
            cells: keep_cells.then_some(table),
        })
    }

    pub fn predict_sentence(
        &self,
        words: &[String],
        keep_cells: bool,
    ) -> Result<SentencePrediction, ModelError> {
        let sent = self.embed_sentence(words)?;
        self.predict_encoded(&sent, keep_cells, false)
    }

    /// Predict a whole document. With `multi_sentence`, tagging runs over
    /// packed multi-sentence segments so word vectors see document
    /// context; the relation table is still built per sentence.
    pub fn predict_document(
        &self,
        doc: &Document,
        opts: &PredictOptions,
    ) -> Result<DocumentPrediction, ModelError> {
        let mut predictions = Vec::with_capacity(doc.sentences.len());
        let mut warnings = Vec::new();
        if !opts.multi_sentence {
            for sentence in &doc.sentences {
                let sent = self.embed_sentence(&sentence.words)?;
                predictions.push(self.predict_encoded(&sent, opts.keep_cells, opts.use_history)?);
            }
            return Ok(DocumentPrediction { sentences: predictions, warnings });
        }
        let splitter = self.splitter()?;
        // the packing budget cannot exceed what the encoder can take
        let l_max = match &self.encoder {
            EncoderStack::Toy(toy) => opts.l_max.min(toy.config.max_positions),
            EncoderStack::External { .. } => opts.l_max,
        };
        let segmented = segment_document(doc, l_max, splitter.as_ref())?;
        warnings.extend(segmented.over_length_warnings(l_max));
        let mut by_sentence: Vec<Option<SentencePrediction>> = vec![None; doc.sentences.len()];
        for seg in &segmented.segments {
            let (rows, _) = self.encode_tokens(&seg.tokens)?;
            for &sid in &seg.sentence_ids {
                let word_rows = seg.word_rows(sid, segmented.aligned[sid].num_words());
                let (sent, _) = self.pooled_sentence(&rows, &word_rows);
                by_sentence[sid] =
                    Some(self.predict_encoded(&sent, opts.keep_cells, opts.use_history)?);
            }
        }
        for (sid, slot) in by_sentence.into_iter().enumerate() {
            predictions.push(slot.unwrap_or_else(|| panic!("sentence {sid} missing from segments")));
        }
        Ok(DocumentPrediction { sentences: predictions, warnings })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            schema: self.schema.clone(),
            encoder: match &self.encoder {
                EncoderStack::Toy(toy) => EncoderCheckpoint::Toy(Box::new(toy.clone())),
                EncoderStack::External { name, d_model, seed, .. } => EncoderCheckpoint::External {
                    name: name.clone(),
                    d_model: *d_model,
                    seed: *seed,
                },
            },
            splitter: self.splitter_name.clone(),
            flags: self.flags,
            pooling: self.pooling,
            policy: self.policy,
            ner: self.ner.clone(),
            re: self.re.clone(),
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Model, ModelError> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(cp.version));
        }
        let encoder = match cp.encoder {
            EncoderCheckpoint::Toy(toy) => EncoderStack::Toy(*toy),
            EncoderCheckpoint::External { name, d_model, seed } => {
                let adapter = adapter_by_name(&name, d_model, seed)?;
                EncoderStack::External { name, d_model, seed, adapter }
            }
        };
        Ok(Model {
            schema: cp.schema,
            encoder,
            splitter_name: cp.splitter,
            ner: cp.ner,
            re: cp.re,
            history: cp.history,
            flags: cp.flags,
            pooling: cp.pooling,
            policy: cp.policy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let text = std::fs::read_to_string(path)?;
        let cp: Checkpoint = serde_json::from_str(&text)?;
        Model::from_checkpoint(cp)
    }
}

impl ModelGrads {
    pub fn param_blocks_mut(&mut self) -> Vec<NamedBlock<'_>> {
        collect_blocks(self.encoder.as_mut(), &mut self.ner, &mut self.re)
    }
}

enum PoolBack {
    First,
    Mean,
    Max(Vec<usize>),
}

struct EmbedCache {
    word_rows: Vec<Vec<usize>>,
    pool_back: Vec<PoolBack>,
    enc: Option<EncoderCache>,
    t: usize,
}

#[derive(Debug, Clone)]
pub struct PredictOptions {
    pub multi_sentence: bool,
    pub l_max: usize,
    pub keep_cells: bool,
    pub use_history: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions { multi_sentence: false, l_max: 256, keep_cells: false, use_history: false }
    }
}

/// Predicted labels, entities, and relation triples for one sentence.
#[derive(Debug, Clone)]
pub struct SentencePrediction {
    pub labels: Vec<usize>,
    pub entities: Vec<Span>,
    pub relations: Vec<Triple>,
    pub cells: Option<RelScoreTable>,
}

#[derive(Debug, Clone)]
pub struct DocumentPrediction {
    pub sentences: Vec<SentencePrediction>,
    pub warnings: Vec<String>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
pub enum EncoderCheckpoint {
    Toy(Box<ToyEncoder>),
    External { name: String, d_model: usize, seed: u64 },
}

/// Everything needed to reload a model: schema, configuration, and all
/// parameter tensors.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub schema: LabelSchema,
    pub encoder: EncoderCheckpoint,
    pub splitter: String,
    pub flags: NerFlags,
    pub pooling: PoolingMode,
    pub policy: DecodePolicy,
    pub ner: NerParams,
    pub re: ReParams,
    pub history: Option<HistoryParams>,
}
