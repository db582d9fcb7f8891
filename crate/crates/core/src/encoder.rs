//! Contextual subword encoders and multi-sentence segment packing.
//!
//! The trainable encoder here is a deterministic toy transformer stack
//! (learned token and position embeddings, self-attention plus tanh
//! feed-forward blocks with residuals) in 64-bit arithmetic, so the whole
//! model can be verified with finite differences. Pre-trained encoders
//! plug in through [`SubwordEncoder`] adapters registered by name.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;
use crate::subword::{split_words, AlignedSentence, SubwordError, SubwordSplitter};

pub const START_TOKEN: &str = "[CLS]";
pub const SEPARATOR_TOKEN: &str = "[SEP]";
pub const UNKNOWN_TOKEN: &str = "[UNK]";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input of {len} tokens exceeds the encoder's {max} positions")]
    OverLength { len: usize, max: usize },
    #[error("number of heads {heads} does not divide d_model {d_model}")]
    BadHeadCount { heads: usize, d_model: usize },
    #[error("unknown encoder adapter {0:?}")]
    UnknownAdapter(String),
    #[error(transparent)]
    Subword(#[from] SubwordError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Toy,
    External(String),
}

impl Default for EncoderKind {
    fn default() -> Self {
        EncoderKind::Toy
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub use_positions: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Toy,
            d_model: 768,
            num_layers: 2,
            num_heads: 4,
            d_ff: 1536,
            max_positions: 512,
            use_positions: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// A desk-scale configuration used by tests and the browser demo.
    pub fn tiny(d_model: usize, seed: u64) -> Self {
        EncoderConfig {
            kind: EncoderKind::Toy,
            d_model,
            num_layers: 1,
            num_heads: 2,
            d_ff: 2 * d_model,
            max_positions: 64,
            use_positions: true,
            seed,
        }
    }
}

/// Subword vocabulary with reserved marker tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: OnceLock<BTreeMap<String, usize>>,
}

impl Vocab {
    pub fn from_subwords<I: IntoIterator<Item = String>>(subwords: I) -> Self {
        let mut uniq: Vec<String> = subwords
            .into_iter()
            .filter(|t| t != START_TOKEN && t != SEPARATOR_TOKEN && t != UNKNOWN_TOKEN)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut tokens = vec![
            START_TOKEN.to_string(),
            SEPARATOR_TOKEN.to_string(),
            UNKNOWN_TOKEN.to_string(),
        ];
        tokens.append(&mut uniq);
        Vocab { tokens, index: OnceLock::new() }
    }

    fn index(&self) -> &BTreeMap<String, usize> {
        self.index.get_or_init(|| {
            self.tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i))
                .collect()
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index().get(token).copied().unwrap_or(2)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// One self-attention + feed-forward block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_q: Array1<f64>,
    pub b_k: Array1<f64>,
    pub b_v: Array1<f64>,
    pub b_o: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl ToyEncoderParams {
    pub fn init(config: &EncoderConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: uniform(rng, d, d, bound),
                w_k: uniform(rng, d, d, bound),
                w_v: uniform(rng, d, d, bound),
                w_o: uniform(rng, d, d, bound),
                b_q: Array1::zeros(d),
                b_k: Array1::zeros(d),
                b_v: Array1::zeros(d),
                b_o: Array1::zeros(d),
                w1: uniform(rng, d, config.d_ff, bound),
                b1: Array1::zeros(config.d_ff),
                w2: uniform(rng, config.d_ff, d, 1.0 / (config.d_ff as f64).sqrt()),
                b2: Array1::zeros(d),
            })
            .collect();
        ToyEncoderParams {
            tok_emb: uniform(rng, vocab_size, d, 0.1),
            pos_emb: uniform(rng, config.max_positions, d, 0.1),
            layers,
        }
    }

    pub fn zeros(config: &EncoderConfig, vocab_size: usize) -> Self {
        let d = config.d_model;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: Array2::zeros((d, d)),
                w_k: Array2::zeros((d, d)),
                w_v: Array2::zeros((d, d)),
                w_o: Array2::zeros((d, d)),
                b_q: Array1::zeros(d),
                b_k: Array1::zeros(d),
                b_v: Array1::zeros(d),
                b_o: Array1::zeros(d),
                w1: Array2::zeros((d, config.d_ff)),
                b1: Array1::zeros(config.d_ff),
                w2: Array2::zeros((config.d_ff, d)),
                b2: Array1::zeros(d),
            })
            .collect();
        ToyEncoderParams {
            tok_emb: Array2::zeros((vocab_size, d)),
            pos_emb: Array2::zeros((config.max_positions, d)),
            layers,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ToyEncoderParams {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    w_q: Array2::zeros(l.w_q.raw_dim()),
                    w_k: Array2::zeros(l.w_k.raw_dim()),
                    w_v: Array2::zeros(l.w_v.raw_dim()),
                    w_o: Array2::zeros(l.w_o.raw_dim()),
                    b_q: Array1::zeros(l.b_q.raw_dim()),
                    b_k: Array1::zeros(l.b_k.raw_dim()),
                    b_v: Array1::zeros(l.b_v.raw_dim()),
                    b_o: Array1::zeros(l.b_o.raw_dim()),
                    w1: Array2::zeros(l.w1.raw_dim()),
                    b1: Array1::zeros(l.b1.raw_dim()),
                    w2: Array2::zeros(l.w2.raw_dim()),
                    b2: Array1::zeros(l.b2.raw_dim()),
                })
                .collect(),
        }
    }
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>, // per-head row-softmax weights
    concat: Array2<f64>,    // attention output before w_o
    x_mid: Array2<f64>,     // after attention residual
    f: Array2<f64>,         // tanh activations
}

/// Forward state needed to run the backward pass.
pub struct EncoderCache {
    ids: Vec<usize>,
    layers: Vec<LayerCache>,
}

/// The trainable toy transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ToyEncoderParams,
}

impl ToyEncoder {
    pub fn new(config: EncoderConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self, EncoderError> {
        if config.d_model % config.num_heads != 0 {
            return Err(EncoderError::BadHeadCount {
                heads: config.num_heads,
                d_model: config.d_model,
            });
        }
        let params = ToyEncoderParams::init(&config, vocab.len(), rng);
        Ok(ToyEncoder { config, vocab, params })
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Array2<f64>, EncoderError> {
        let ids = self.vocab.ids(tokens);
        Ok(self.forward_ids(&ids)?.0)
    }

    pub fn forward_tokens(&self, tokens: &[String]) -> Result<(Array2<f64>, EncoderCache), EncoderError> {
        let ids = self.vocab.ids(tokens);
        self.forward_ids(&ids)
    }

    pub fn forward_ids(&self, ids: &[usize]) -> Result<(Array2<f64>, EncoderCache), EncoderError> {
        let t = ids.len();
        if t > self.config.max_positions {
            return Err(EncoderError::OverLength { len: t, max: self.config.max_positions });
        }
        let d = self.config.d_model;
        let mut x = Array2::zeros((t, d));
        for (row, &id) in ids.iter().enumerate() {
            let mut slot = x.row_mut(row);
            slot.assign(&self.params.tok_emb.row(id));
            if self.config.use_positions {
                slot += &self.params.pos_emb.row(row);
            }
        }
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (next, cache) = self.layer_forward(layer, x);
            layers.push(cache);
            x = next;
        }
        Ok((x, EncoderCache { ids: ids.to_vec(), layers }))
    }

    fn layer_forward(&self, layer: &LayerParams, x: Array2<f64>) -> (Array2<f64>, LayerCache) {
        let heads = self.config.num_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = x.dot(&layer.w_q) + &layer.b_q;
        let k = x.dot(&layer.w_k) + &layer.b_k;
        let v = x.dot(&layer.w_v) + &layer.b_v;

        let t = x.dim().0;
        let mut concat = Array2::zeros((t, self.config.d_model));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * scale);
            for row in scores.rows_mut() {
                crate::math::softmax_inplace(row);
            }
            let oh = scores.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            attn.push(scores);
        }
        let x_mid = &x + &(concat.dot(&layer.w_o) + &layer.b_o);

        let z = x_mid.dot(&layer.w1) + &layer.b1;
        let f = z.mapv(f64::tanh);
        let out = &x_mid + &(f.dot(&layer.w2) + &layer.b2);

        (out, LayerCache { x_in: x, q, k, v, attn, concat, x_mid, f })
    }

    /// Accumulate parameter gradients for `d_out` (gradient of the loss with
    /// respect to the encoder output) into `grads`.
    pub fn backward(&self, cache: &EncoderCache, d_out: Array2<f64>, grads: &mut ToyEncoderParams) {
        let heads = self.config.num_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = d_out;
        for li in (0..self.params.layers.len()).rev() {
            let layer = &self.params.layers[li];
            let lc = &cache.layers[li];
            // feed-forward block (residual)
            let d_ffn = dx.clone();
            let mut d_xmid = dx;
            let df = d_ffn.dot(&layer.w2.t());
            let dz = &df * &lc.f.mapv(|f| 1.0 - f * f);
            d_xmid += &dz.dot(&layer.w1.t());

            // attention block (residual)
            let d_attn_out = d_xmid.clone();
            let mut dx_in = d_xmid;
            let d_concat = d_attn_out.dot(&layer.w_o.t());

            let mut dq = Array2::zeros(lc.q.raw_dim());
            let mut dk = Array2::zeros(lc.k.raw_dim());
            let mut dv = Array2::zeros(lc.v.raw_dim());
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let doh = d_concat.slice(cols);
                let a = &lc.attn[h];
                let vh = lc.v.slice(cols);
                let da = doh.dot(&vh.t());
                dv.slice_mut(cols).assign(&a.t().dot(&doh));
                let mut ds = Array2::zeros(a.raw_dim());
                for r in 0..a.dim().0 {
                    ds.row_mut(r).assign(&crate::math::softmax_backward_row(
                        a.row(r),
                        da.row(r),
                    ));
                }
                ds.mapv_inplace(|x| x * scale);
                let qh = lc.q.slice(cols);
                let kh = lc.k.slice(cols);
                dq.slice_mut(cols).assign(&ds.dot(&kh));
                dk.slice_mut(cols).assign(&ds.t().dot(&qh));
            }

            dx_in += &dq.dot(&layer.w_q.t());
            dx_in += &dk.dot(&layer.w_k.t());
            dx_in += &dv.dot(&layer.w_v.t());

            let gl = &mut grads.layers[li];
            gl.w_o += &lc.concat.t().dot(&d_attn_out);
            gl.b_o += &d_attn_out.sum_axis(Axis(0));
            gl.w2 += &lc.f.t().dot(&d_ffn);
            gl.b2 += &d_ffn.sum_axis(Axis(0));
            gl.w1 += &lc.x_mid.t().dot(&dz);
            gl.b1 += &dz.sum_axis(Axis(0));
            gl.w_q += &lc.x_in.t().dot(&dq);
            gl.b_q += &dq.sum_axis(Axis(0));
            gl.w_k += &lc.x_in.t().dot(&dk);
            gl.b_k += &dk.sum_axis(Axis(0));
            gl.w_v += &lc.x_in.t().dot(&dv);
            gl.b_v += &dv.sum_axis(Axis(0));

            dx = dx_in;
        }

        for (row, &id) in cache.ids.iter().enumerate() {
            let mut tok = grads.tok_emb.row_mut(id);
            tok += &dx.row(row);
            if self.config.use_positions {
                let mut pos = grads.pos_emb.row_mut(row);
                pos += &dx.row(row);
            }
        }
    }
}

/// Subwords-in, embeddings-out adapter for external (frozen) encoders.
pub trait SubwordEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn d_model(&self) -> usize;
    fn encode(&self, tokens: &[String]) -> Result<Array2<f64>, EncoderError>;
    /// The tokenizer this encoder expects its input to come from.
    fn splitter(&self) -> Box<dyn SubwordSplitter>;
}

/// Deterministic context-free adapter: every token embeds to a fixed
/// pseudo-random vector derived from its bytes. Stands in for real
/// pre-trained encoders in tests and demos.
pub struct HashedEncoder {
    pub d_model: usize,
    pub seed: u64,
}

impl SubwordEncoder for HashedEncoder {
    fn name(&self) -> &str {
        "hashed"
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn encode(&self, tokens: &[String]) -> Result<Array2<f64>, EncoderError> {
        let mut out = Array2::zeros((tokens.len(), self.d_model));
        for (row, token) in tokens.iter().enumerate() {
            let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
            for b in token.bytes() {
                h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            for c in 0..self.d_model {
                out[[row, c]] = rng.gen_range(-1.0..1.0);
            }
        }
        Ok(out)
    }

    fn splitter(&self) -> Box<dyn SubwordSplitter> {
        Box::new(crate::subword::IdentitySplitter)
    }
}

type AdapterFactory = Box<dyn Fn(usize, u64) -> Box<dyn SubwordEncoder> + Send + Sync>;

fn adapter_registry() -> &'static Mutex<BTreeMap<String, AdapterFactory>> {
    static REGISTRY: OnceLock<Mutex<BTreeMap<String, AdapterFactory>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<String, AdapterFactory> = BTreeMap::new();
        map.insert(
            "hashed".to_string(),
            Box::new(|d_model, seed| Box::new(HashedEncoder { d_model, seed })),
        );
        Mutex::new(map)
    })
}

/// Make an adapter constructible through configuration by name.
pub fn register_adapter(
    name: &str,
    factory: impl Fn(usize, u64) -> Box<dyn SubwordEncoder> + Send + Sync + 'static,
) {
    adapter_registry()
        .lock()
        .unwrap()
        .insert(name.to_string(), Box::new(factory));
}

pub fn adapter_by_name(name: &str, d_model: usize, seed: u64) -> Result<Box<dyn SubwordEncoder>, EncoderError> {
    let registry = adapter_registry().lock().unwrap();
    match registry.get(name) {
        Some(factory) => Ok(factory(d_model, seed)),
        None => Err(EncoderError::UnknownAdapter(name.to_string())),
    }
}

/// Where a segment position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Start,
    Separator,
    Word { sentence: usize, word: usize, subword: usize },
}

/// A packed run of whole sentences: one start marker, sentences separated
/// by separator markers, no trailing separator.
#[derive(Debug, Clone)]
pub struct Segment {
    pub sentence_ids: Vec<usize>,
    pub tokens: Vec<String>,
    pub origin: Vec<TokenOrigin>,
    pub over_length: bool,
}

impl Segment {
    fn new() -> Self {
        Segment {
            sentence_ids: Vec::new(),
            tokens: vec![START_TOKEN.to_string()],
            origin: vec![TokenOrigin::Start],
            over_length: false,
        }
    }

    /// A segment holding exactly one sentence.
    pub fn single(sentence_id: usize, aligned: &AlignedSentence) -> Self {
        let mut seg = Segment::new();
        seg.push_sentence(sentence_id, aligned);
        seg
    }

    fn push_sentence(&mut self, sentence_id: usize, aligned: &AlignedSentence) {
        if !self.sentence_ids.is_empty() {
            self.tokens.push(SEPARATOR_TOKEN.to_string());
            self.origin.push(TokenOrigin::Separator);
        }
        for (word, range) in (0..aligned.num_words()).map(|w| (w, aligned.span(w))) {
            for (k, sub) in range.clone().enumerate() {
                self.tokens.push(aligned.subwords[sub].clone());
                self.origin.push(TokenOrigin::Word { sentence: sentence_id, word, subword: k });
            }
        }
        self.sentence_ids.push(sentence_id);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Segment row indices of each word's subwords for one sentence,
    /// in word order.
    pub fn word_rows(&self, sentence_id: usize, num_words: usize) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); num_words];
        for (pos, origin) in self.origin.iter().enumerate() {
            if let TokenOrigin::Word { sentence, word, .. } = origin {
                if *sentence == sentence_id {
                    rows[*word].push(pos);
                }
            }
        }
        rows
    }
}

/// A document split into encoder-sized segments, plus the per-sentence
/// alignments the segments were built from.
#[derive(Debug, Clone)]
pub struct SegmentedDocument {
    pub aligned: Vec<AlignedSentence>,
    pub segments: Vec<Segment>,
}

impl SegmentedDocument {
    pub fn over_length_warnings(&self, l_max: usize) -> Vec<String> {
        self.segments
            .iter()
            .filter(|s| s.over_length)
            .map(|s| {
                format!(
                    "sentence {} needs {} tokens, over the {l_max}-token budget",
                    s.sentence_ids[0],
                    s.len()
                )
            })
            .collect()
    }
}

/// Greedily pack consecutive sentences into segments of at most `l_max`
/// subword tokens, markers included. A single sentence that cannot fit
/// becomes its own segment flagged `over_length`.
pub fn segment_document(
    doc: &Document,
    l_max: usize,
    splitter: &dyn SubwordSplitter,
) -> Result<SegmentedDocument, EncoderError> {
    let aligned: Vec<AlignedSentence> = doc
        .sentences
        .iter()
        .map(|s| split_words(&s.words, splitter))
        .collect::<Result<_, _>>()?;

    let mut segments = Vec::new();
    let mut current = Segment::new();
    for (sid, al) in aligned.iter().enumerate() {
        let separator = usize::from(!current.sentence_ids.is_empty());
        if !current.sentence_ids.is_empty() && current.len() + separator + al.num_subwords() > l_max
        {
            segments.push(std::mem::replace(&mut current, Segment::new()));
        }
        current.push_sentence(sid, al);
        if current.len() > l_max {
            current.over_length = true;
            segments.push(std::mem::replace(&mut current, Segment::new()));
        }
    }
    if !current.sentence_ids.is_empty() {
        segments.push(current);
    }
    Ok(SegmentedDocument { aligned, segments })
}
