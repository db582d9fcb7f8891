//! Word-to-subword splitting, the word/subword alignment, and pooling of
//! subword embedding rows back into word vectors.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("cannot split an empty sentence")]
    EmptySentence,
    #[error("cannot split empty word at position {0}")]
    EmptyWord(usize),
    #[error("cannot pool an empty embedding matrix")]
    EmptyPool,
    #[error("unknown splitter {0:?}")]
    UnknownSplitter(String),
}

/// How subword embedding rows are reduced to one word vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    First,
    Mean,
    #[default]
    Max,
}

/// A sentence with its subword tokenization. `spans[i] = (first, count)`
/// locates word `i`'s subwords in the flat `subwords` list; the spans
/// partition the list in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedSentence {
    pub words: Vec<String>,
    pub subwords: Vec<String>,
    pub spans: Vec<(usize, usize)>,
}

impl AlignedSentence {
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_subwords(&self) -> usize {
        self.subwords.len()
    }

    /// Subword index range of word `i`.
    pub fn span(&self, i: usize) -> std::ops::Range<usize> {
        let (first, count) = self.spans[i];
        first..first + count
    }
}

/// Words-in, subwords-out. Implementations must be deterministic and must
/// produce at least one subword per non-empty word.
pub trait SubwordSplitter: Send + Sync {
    fn name(&self) -> &str;
    fn split_word(&self, word: &str) -> Vec<String>;
}

/// Deterministic stand-in for a trained tokenizer: greedy chunks of at most
/// `max_chunk` characters, continuation chunks prefixed with `##`.
/// "London" becomes `["Lond", "##on"]`.
#[derive(Debug, Clone)]
pub struct ChunkSplitter {
    pub max_chunk: usize,
}

impl Default for ChunkSplitter {
    fn default() -> Self {
        ChunkSplitter { max_chunk: 4 }
    }
}

impl SubwordSplitter for ChunkSplitter {
    fn name(&self) -> &str {
        "toy"
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        for (k, chunk) in chars.chunks(self.max_chunk).enumerate() {
            let mut tok = String::new();
            if k > 0 {
                tok.push_str("##");
            }
            tok.extend(chunk);
            out.push(tok);
        }
        out
    }
}

/// One subword per word. Matches encoders that operate on whole words.
#[derive(Debug, Clone, Default)]
pub struct IdentitySplitter;

impl SubwordSplitter for IdentitySplitter {
    fn name(&self) -> &str {
        "identity"
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        vec![word.to_string()]
    }
}

/// Fixed-dictionary splitter with a fallback; adapter for external
/// tokenizers whose vocabulary is known ahead of time.
pub struct DictSplitter {
    pub entries: std::collections::BTreeMap<String, Vec<String>>,
    pub fallback: Box<dyn SubwordSplitter>,
}

impl SubwordSplitter for DictSplitter {
    fn name(&self) -> &str {
        "dict"
    }

    fn split_word(&self, word: &str) -> Vec<String> {
        match self.entries.get(word) {
            Some(toks) => toks.clone(),
            None => self.fallback.split_word(word),
        }
    }
}

/// Look a splitter up by its registered name.
pub fn splitter_by_name(name: &str) -> Result<Box<dyn SubwordSplitter>, SubwordError> {
    match name {
        "toy" => Ok(Box::new(ChunkSplitter::default())),
        "identity" => Ok(Box::new(IdentitySplitter)),
        other => Err(SubwordError::UnknownSplitter(other.to_string())),
    }
}

/// Split every word and record the word/subword alignment.
pub fn split_words(
    words: &[String],
    splitter: &dyn SubwordSplitter,
) -> Result<AlignedSentence, SubwordError> {
    if words.is_empty() {
        return Err(SubwordError::EmptySentence);
    }
    let mut subwords = Vec::new();
    let mut spans = Vec::with_capacity(words.len());
    for (i, word) in words.iter().enumerate() {
        if word.is_empty() {
            return Err(SubwordError::EmptyWord(i));
        }
        let toks = splitter.split_word(word);
        assert!(!toks.is_empty(), "splitter returned no subwords for {word:?}");
        spans.push((subwords.len(), toks.len()));
        subwords.extend(toks);
    }
    Ok(AlignedSentence {
        words: words.to_vec(),
        subwords,
        spans,
    })
}

/// Reduce an `s x d` block of subword embeddings to a single word vector.
pub fn pool_word(rows: ArrayView2<f64>, mode: PoolingMode) -> Result<Array1<f64>, SubwordError> {
    let (s, d) = rows.dim();
    if s == 0 || d == 0 {
        return Err(SubwordError::EmptyPool);
    }
    let out = match mode {
        PoolingMode::First => rows.row(0).to_owned(),
        PoolingMode::Mean => rows.mean_axis(ndarray::Axis(0)).expect("s >= 1"),
        PoolingMode::Max => {
            let mut acc = rows.row(0).to_owned();
            for r in 1..s {
                for c in 0..d {
                    if rows[[r, c]] > acc[c] {
                        acc[c] = rows[[r, c]];
                    }
                }
            }
            acc
        }
    };
    Ok(out)
}

/// Max-pool plus the row index that produced each output coordinate, for
/// routing gradients back to the winning rows.
pub fn max_pool_with_argmax(rows: ArrayView2<f64>) -> (Array1<f64>, Vec<usize>) {
    let (s, d) = rows.dim();
    assert!(s >= 1);
    let mut vals = rows.row(0).to_owned();
    let mut args = vec![0usize; d];
    for r in 1..s {
        for c in 0..d {
            if rows[[r, c]] > vals[c] {
                vals[c] = rows[[r, c]];
                args[c] = r;
            }
        }
    }
    (vals, args)
}

/// Pool each word's subword rows of `seq` (a `num_subwords x d` matrix)
/// into an `num_words x d` matrix.
pub fn pool_sentence(
    aligned: &AlignedSentence,
    seq: ArrayView2<f64>,
    mode: PoolingMode,
) -> Result<Array2<f64>, SubwordError> {
    let d = seq.dim().1;
    let mut out = Array2::zeros((aligned.num_words(), d));
    for i in 0..aligned.num_words() {
        let range = aligned.span(i);
        let pooled = pool_word(seq.slice(ndarray::s![range, ..]), mode)?;
        out.row_mut(i).assign(&pooled);
    }
    Ok(out)
}
