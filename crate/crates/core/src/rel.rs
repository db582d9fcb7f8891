//! The relation head: all off-diagonal table cells are scored at once.
//! Each word gets per-relation query and key projections of its span and
//! label features; cell (i, j)'s logit for relation r is the dot product
//! of word i's query and word j's key for r, softmaxed over relations.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::NULL_RELATION_ID;
use crate::math::{argmax, cross_entropy_from_logits, softmax, softmax_inplace};
use crate::ner::{DropoutPlan, EncodedSentence};
use crate::table::{CellLabels, LabelTable, SpanIndex};
use crate::LossReduction;

#[derive(Debug, Error)]
pub enum ReError {
    #[error("input has {got} dims but the projections expect {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label id {0} out of range")]
    UnknownLabel(usize),
    #[error("score table is {got} wide but the gold table has {expected} words")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("history-based decoding is not enabled on this model")]
    HistoryDisabled,
}

/// Whether span features follow the training rule (each word stands for
/// itself) or the prediction rule (max-pool over the enclosing span).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Predict,
}

/// Per-relation query/key projections, indexed by relation label id
/// (the negative label included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReParams {
    pub w_q: Array3<f64>, // |R| x d_att x d_rel
    pub w_k: Array3<f64>,
    pub b_q: Array2<f64>, // |R| x d_att
    pub b_k: Array2<f64>,
}

impl ReParams {
    pub fn init(num_labels: usize, d_rel: usize, d_att: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_rel as f64).sqrt();
        let mut mat = || Array3::from_shape_fn((num_labels, d_att, d_rel), |_| rng.gen_range(-bound..bound));
        ReParams {
            w_q: mat(),
            w_k: mat(),
            b_q: Array2::zeros((num_labels, d_att)),
            b_k: Array2::zeros((num_labels, d_att)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ReParams {
            w_q: Array3::zeros(self.w_q.raw_dim()),
            w_k: Array3::zeros(self.w_k.raw_dim()),
            b_q: Array2::zeros(self.b_q.raw_dim()),
            b_k: Array2::zeros(self.b_k.raw_dim()),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.w_q.dim().0
    }

    pub fn d_att(&self) -> usize {
        self.w_q.dim().1
    }

    pub fn d_rel(&self) -> usize {
        self.w_q.dim().2
    }
}

/// Per-cell probability distributions over relation labels for the strict
/// upper triangle; diagonal and lower-triangle cells are masked and may
/// never be read.
#[derive(Debug, Clone)]
pub struct RelScoreTable {
    n: usize,
    num_labels: usize,
    probs: Array3<f64>,
}

impl RelScoreTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// The probability slice of a valid cell.
    pub fn probs(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        assert!(i < j && j < self.n, "cell ({i},{j}) is masked");
        self.probs.slice(s![i, j, ..])
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| (i, j)))
    }
}

/// The span feature at position `i`. At prediction time this max-pools
/// the word vectors of the enclosing span, so every position inside one
/// span maps to the same vector; at training time each word stands for
/// itself, which keeps updates distinct inside gold spans.
pub fn span_feature(
    sent: &EncodedSentence,
    i: usize,
    index: &SpanIndex,
    phase: Phase,
) -> Array1<f64> {
    match phase {
        Phase::Train => sent.words.row(i).to_owned(),
        Phase::Predict => {
            let (first, last) = (index.first[i], index.last[i]);
            let block = sent.words.slice(s![first..=last, ..]);
            let mut vals = block.row(0).to_owned();
            for r in 1..block.dim().0 {
                for c in 0..block.dim().1 {
                    if block[[r, c]] > vals[c] {
                        vals[c] = block[[r, c]];
                    }
                }
            }
            vals
        }
    }
}

/// Concatenate the span feature with the label embedding of the word's
/// entity label.
pub fn rel_input(
    z: ArrayView1<f64>,
    label: usize,
    label_emb: ArrayView2<f64>,
) -> Result<Array1<f64>, ReError> {
    if label >= label_emb.dim().0 {
        return Err(ReError::UnknownLabel(label));
    }
    let d_label = label_emb.dim().1;
    let mut h = Array1::zeros(z.len() + d_label);
    h.slice_mut(s![0..z.len()]).assign(&z);
    h.slice_mut(s![z.len()..]).assign(&label_emb.row(label));
    Ok(h)
}

/// Project every word's relation input into query and key space for every
/// relation label: `Q[i, r, :] = W_q[r] h_i + b_q[r]`, `K` likewise.
pub fn build_qk(h: ArrayView2<f64>, params: &ReParams) -> Result<(Array3<f64>, Array3<f64>), ReError> {
    let (n, d_rel) = h.dim();
    if d_rel != params.d_rel() {
        return Err(ReError::DimensionMismatch { expected: params.d_rel(), got: d_rel });
    }
    let num_labels = params.num_labels();
    let d_att = params.d_att();
    let mut q = Array3::zeros((n, num_labels, d_att));
    let mut k = Array3::zeros((n, num_labels, d_att));
    for r in 0..num_labels {
        // (n x d_rel) . (d_rel x d_att)
        let qr = h.dot(&params.w_q.index_axis(Axis(0), r).t()) + &params.b_q.row(r);
        let kr = h.dot(&params.w_k.index_axis(Axis(0), r).t()) + &params.b_k.row(r);
        q.slice_mut(s![.., r, ..]).assign(&qr);
        k.slice_mut(s![.., r, ..]).assign(&kr);
    }
    Ok((q, k))
}

fn cell_logits(q: &Array3<f64>, k: &Array3<f64>) -> Array3<f64> {
    let (n, num_labels, _) = q.dim();
    let mut logits = Array3::zeros((n, n, num_labels));
    for r in 0..num_labels {
        let qr = q.slice(s![.., r, ..]);
        let kr = k.slice(s![.., r, ..]);
        let lr = qr.dot(&kr.t()); // n x n
        logits.slice_mut(s![.., .., r]).assign(&lr);
    }
    logits
}

/// Score all cells in one batched contraction: per relation label one
/// `Q_r K_r^T` product, then a per-cell softmax over labels. No cell
/// depends on any other.
pub fn score_all(q: &Array3<f64>, k: &Array3<f64>) -> RelScoreTable {
    let (n, num_labels, _) = q.dim();
    let mut probs = cell_logits(q, k);
    for i in 0..n {
        for j in i + 1..n {
            softmax_inplace(probs.slice_mut(s![i, j, ..]));
        }
    }
    RelScoreTable { n, num_labels, probs }
}

/// Cross-entropy over every strictly-upper cell against the gold table,
/// negative cells included as the negative class.
pub fn re_loss(
    table: &RelScoreTable,
    gold: &LabelTable,
    reduction: LossReduction,
) -> Result<f64, ReError> {
    if table.n != gold.n {
        return Err(ReError::ShapeMismatch { expected: gold.n, got: table.n });
    }
    let mut loss = 0.0;
    let mut cells = 0usize;
    for (i, j) in table.cells() {
        let p = table.probs(i, j)[gold.cell(i, j)];
        loss -= p.max(1e-300).ln();
        cells += 1;
    }
    Ok(match reduction {
        LossReduction::Sum => loss,
        LossReduction::Mean if cells > 0 => loss / cells as f64,
        LossReduction::Mean => 0.0,
    })
}

/// Per-cell argmax labels; ties break to the lowest label id.
pub fn decode_relations_once(table: &RelScoreTable) -> CellLabels {
    let mut cells = CellLabels::filled(table.n, NULL_RELATION_ID);
    for (i, j) in table.cells() {
        cells.set(i, j, argmax(table.probs(i, j)));
    }
    cells
}

/// Extra parameters for the sequential history-based decoding variant.
/// Row `|R|` of `rel_emb` is the out-of-table null embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryParams {
    pub rel_emb: Array2<f64>, // (|R|+1) x d_hist
    pub w_left: Array2<f64>,  // |R| x d_hist
    pub w_below: Array2<f64>, // |R| x d_hist
}

impl HistoryParams {
    pub fn init(num_labels: usize, d_hist: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_hist as f64).sqrt();
        HistoryParams {
            rel_emb: Array2::from_shape_fn((num_labels + 1, d_hist), |_| rng.gen_range(-0.1..0.1)),
            w_left: Array2::from_shape_fn((num_labels, d_hist), |_| rng.gen_range(-bound..bound)),
            w_below: Array2::from_shape_fn((num_labels, d_hist), |_| rng.gen_range(-bound..bound)),
        }
    }

    pub fn zeros(num_labels: usize, d_hist: usize) -> Self {
        HistoryParams {
            rel_emb: Array2::zeros((num_labels + 1, d_hist)),
            w_left: Array2::zeros((num_labels, d_hist)),
            w_below: Array2::zeros((num_labels, d_hist)),
        }
    }

    fn null_row(&self) -> usize {
        self.rel_emb.dim().0 - 1
    }
}

/// Sequential decoding in ascending distance from the diagonal, top-left
/// to bottom-right within each distance. Each cell's logits add history
/// terms from the already-predicted labels of its left and below
/// neighbors; neighbors outside the table use the null embedding.
pub fn decode_relations_history(
    q: &Array3<f64>,
    k: &Array3<f64>,
    hist: &HistoryParams,
) -> CellLabels {
    let base = cell_logits(q, k);
    let n = base.dim().0;
    let num_labels = base.dim().2;
    let mut cells = CellLabels::filled(n, NULL_RELATION_ID);
    for dist in 1..n {
        for i in 0..n - dist {
            let j = i + dist;
            let left = if j - 1 > i { cells.get(i, j - 1) } else { hist.null_row() };
            let below = if i + 1 < j { cells.get(i + 1, j) } else { hist.null_row() };
            let left_emb = hist.rel_emb.row(left);
            let below_emb = hist.rel_emb.row(below);
            let mut logits = base.slice(s![i, j, ..]).to_owned();
            for r in 0..num_labels {
                logits[r] += hist.w_left.row(r).dot(&left_emb) + hist.w_below.row(r).dot(&below_emb);
            }
            cells.set(i, j, argmax(softmax(logits.view()).view()));
        }
    }
    cells
}

/// Forward pass of the relation head during teacher-forced training,
/// keeping what the backward pass needs.
pub struct ReTrainCache {
    pub h: Array2<f64>,
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub probs: Array3<f64>,
    pub loss: f64,
    labels: Vec<usize>,
    scale: f64,
}

/// Training forward: span features per the training rule plus gold label
/// embeddings, scored against the gold table.
pub fn re_forward_train(
    sent: &EncodedSentence,
    gold: &LabelTable,
    label_emb: ArrayView2<f64>,
    params: &ReParams,
    reduction: LossReduction,
    dropout: Option<&DropoutPlan>,
) -> Result<ReTrainCache, ReError> {
    let n = sent.len();
    if gold.n != n {
        return Err(ReError::ShapeMismatch { expected: n, got: gold.n });
    }
    let d_model = sent.d_model();
    let d_label = label_emb.dim().1;
    let mut h = Array2::zeros((n, d_model + d_label));
    for i in 0..n {
        let mut z = sent.words.row(i).to_owned();
        if let Some(plan) = dropout {
            z *= &plan.z.row(i);
        }
        let label = gold.diag[i];
        if label >= label_emb.dim().0 {
            return Err(ReError::UnknownLabel(label));
        }
        h.slice_mut(s![i, 0..d_model]).assign(&z);
        h.slice_mut(s![i, d_model..]).assign(&label_emb.row(label));
    }
    let (q, k) = build_qk(h.view(), params)?;
    let logits = cell_logits(&q, &k);
    let mut probs = logits.clone();
    let mut loss = 0.0;
    let mut cells = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            loss += cross_entropy_from_logits(logits.slice(s![i, j, ..]), gold.cell(i, j));
            softmax_inplace(probs.slice_mut(s![i, j, ..]));
            cells += 1;
        }
    }
    let scale = match reduction {
        LossReduction::Sum => 1.0,
        LossReduction::Mean if cells > 0 => 1.0 / cells as f64,
        LossReduction::Mean => 0.0,
    };
    Ok(ReTrainCache { h, q, k, probs, loss: loss * scale, labels: gold.diag.clone(), scale })
}

/// Backward pass matching [`re_forward_train`]. Head gradients accumulate
/// into `grads` and `d_label_emb`; word-vector gradients into `d_words`.
pub fn re_backward(
    cache: &ReTrainCache,
    gold: &LabelTable,
    params: &ReParams,
    dropout: Option<&DropoutPlan>,
    outer_scale: f64,
    grads: &mut ReParams,
    d_label_emb: &mut Array2<f64>,
    d_words: &mut Array2<f64>,
) {
    let n = gold.n;
    let num_labels = params.num_labels();
    let d_model = d_words.dim().1;
    let weight = cache.scale * outer_scale;

    // dL/dlogits = probs - onehot(gold) on valid cells, 0 elsewhere.
    let mut dlogits = Array3::zeros(cache.probs.raw_dim());
    for i in 0..n {
        for j in i + 1..n {
            let mut slice = dlogits.slice_mut(s![i, j, ..]);
            slice.assign(&cache.probs.slice(s![i, j, ..]));
            slice[gold.cell(i, j)] -= 1.0;
            slice.mapv_inplace(|x| x * weight);
        }
    }

    let mut dh = Array2::zeros(cache.h.raw_dim());
    for r in 0..num_labels {
        let dl_r = dlogits.slice(s![.., .., r]);
        let qr = cache.q.slice(s![.., r, ..]);
        let kr = cache.k.slice(s![.., r, ..]);
        let dq_r = dl_r.dot(&kr); // n x d_att
        let dk_r = dl_r.t().dot(&qr);
        {
            let mut gw = grads.w_q.index_axis_mut(Axis(0), r);
            gw += &dq_r.t().dot(&cache.h);
            let mut gb = grads.b_q.row_mut(r);
            gb += &dq_r.sum_axis(Axis(0));
        }
        {
            let mut gw = grads.w_k.index_axis_mut(Axis(0), r);
            gw += &dk_r.t().dot(&cache.h);
            let mut gb = grads.b_k.row_mut(r);
            gb += &dk_r.sum_axis(Axis(0));
        }
        dh += &dq_r.dot(&params.w_q.index_axis(Axis(0), r));
        dh += &dk_r.dot(&params.w_k.index_axis(Axis(0), r));
    }

    for i in 0..n {
        let mut dz = dh.slice(s![i, 0..d_model]).to_owned();
        if let Some(plan) = dropout {
            dz *= &plan.z.row(i);
        }
        {
            let mut row = d_words.row_mut(i);
            row += &dz;
        }
        let mut lrow = d_label_emb.row_mut(cache.labels[i]);
        lrow += &dh.slice(s![i, d_model..]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSchema, RelationLabel};
    use crate::demo;
    use crate::table::{build_gold_table, span_index, spans_from_bilou, BilouRepair, Span};
    use ndarray::array;
    use rand::SeedableRng;

    fn schema() -> LabelSchema {
        LabelSchema::new(vec!["Person".into(), "Location".into()], vec!["LiveIn".into()])
    }

    fn sent(words: Array2<f64>) -> EncodedSentence {
        let d = words.dim().1;
        EncodedSentence { words, start: Array1::zeros(d) }
    }

    #[test]
    fn train_and_predict_span_features_differ_inside_spans() {
        let words = array![[1.0, -1.0], [0.5, 2.0], [0.0, 0.0]];
        let s = sent(words);
        let spans = vec![Span { start: 0, end: 2, etype: 0 }];
        let index = span_index(&spans, 3).unwrap();

        let p0 = span_feature(&s, 0, &index, Phase::Predict);
        let p1 = span_feature(&s, 1, &index, Phase::Predict);
        assert_eq!(p0, p1);
        assert_eq!(p0, array![1.0, 2.0]);

        let t0 = span_feature(&s, 0, &index, Phase::Train);
        let t1 = span_feature(&s, 1, &index, Phase::Train);
        assert_ne!(t0, t1);
        assert_eq!(t0, s.words.row(0).to_owned());

        // unit span: both phases agree
        let u = span_feature(&s, 2, &index, Phase::Predict);
        assert_eq!(u, span_feature(&s, 2, &index, Phase::Train));
    }

    #[test]
    fn rel_input_concatenates_label_embedding() {
        let z = array![1.0, 2.0, 3.0, 4.0];
        let label_emb = array![[0.0, 0.0], [5.0, 6.0]];
        let h = rel_input(z.view(), 1, label_emb.view()).unwrap();
        assert_eq!(h.len(), 6);
        assert_eq!(h, array![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let h0 = rel_input(z.view(), 0, label_emb.view()).unwrap();
        assert_eq!(h0, array![1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        assert!(matches!(
            rel_input(z.view(), 9, label_emb.view()),
            Err(ReError::UnknownLabel(9))
        ));
    }

    #[test]
    fn qk_shapes_and_bias_only_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ReParams::init(3, 4, 2, &mut rng);
        let h = Array2::from_elem((5, 4), 0.5);
        let (q, k) = build_qk(h.view(), &params).unwrap();
        assert_eq!(q.dim(), (5, 3, 2));
        assert_eq!(k.dim(), (5, 3, 2));

        params.w_q.fill(0.0);
        params.b_q.assign(&array![[1.0, -1.0], [2.0, -2.0], [3.0, -3.0]]);
        let (q, _) = build_qk(h.view(), &params).unwrap();
        for i in 0..5 {
            for r in 0..3 {
                assert_eq!(q.slice(s![i, r, ..]).to_owned(), params.b_q.row(r).to_owned());
            }
        }
    }

    #[test]
    fn one_by_one_projection_matches_hand_arithmetic() {
        let params = ReParams {
            w_q: Array3::from_shape_vec((1, 1, 2), vec![2.0, -0.5]).unwrap(),
            w_k: Array3::from_shape_vec((1, 1, 2), vec![1.5, 4.0]).unwrap(),
            b_q: Array2::from_shape_vec((1, 1), vec![0.25]).unwrap(),
            b_k: Array2::from_shape_vec((1, 1), vec![-1.0]).unwrap(),
        };
        let h = array![[3.0, 2.0]];
        let (q, k) = build_qk(h.view(), &params).unwrap();
        // q = 2*3 - 0.5*2 + 0.25 = 5.25 ; k = 1.5*3 + 4*2 - 1 = 11.5
        assert!((q[[0, 0, 0]] - 5.25).abs() < 1e-12);
        assert!((k[[0, 0, 0]] - 11.5).abs() < 1e-12);
    }

    #[test]
    fn zero_projections_give_uniform_cells() {
        let q = Array3::zeros((4, 3, 2));
        let k = Array3::zeros((4, 3, 2));
        let table = score_all(&q, &k);
        for (i, j) in table.cells() {
            let p = table.probs(i, j);
            for &v in p.iter() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
            assert!((p.sum() - 1.0).abs() < 1e-6);
        }
        let cells = decode_relations_once(&table);
        for (i, j) in table.cells() {
            assert_eq!(cells.get(i, j), 0, "uniform ties must pick label 0");
        }
    }

    #[test]
    fn two_word_table_has_one_cell() {
        let q = Array3::zeros((2, 1, 1));
        let k = Array3::zeros((2, 1, 1));
        let table = score_all(&q, &k);
        assert_eq!(table.cells().count(), 1);
    }

    #[test]
    fn batched_scoring_equals_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(2..8);
            let num_labels = rng.gen_range(1..5);
            let d_att = rng.gen_range(1..4);
            let q = Array3::from_shape_fn((n, num_labels, d_att), |_| rng.gen_range(-2.0..2.0));
            let k = Array3::from_shape_fn((n, num_labels, d_att), |_| rng.gen_range(-2.0..2.0));
            let table = score_all(&q, &k);
            for i in 0..n {
                for j in i + 1..n {
                    let mut logits = Array1::zeros(num_labels);
                    for r in 0..num_labels {
                        let mut dot = 0.0;
                        for a in 0..d_att {
                            dot += q[[i, r, a]] * k[[j, r, a]];
                        }
                        logits[r] = dot;
                    }
                    let expect = softmax(logits.view());
                    let got = table.probs(i, j);
                    for r in 0..num_labels {
                        assert!((expect[r] - got[r]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_loss_matches_closed_form() {
        let schema = schema();
        let nl = schema.num_relation_labels() as f64;
        let q = Array3::zeros((4, schema.num_relation_labels(), 2));
        let k = q.clone();
        let table = score_all(&q, &k);
        let gold = LabelTable::empty(4);
        let loss = re_loss(&table, &gold, LossReduction::Sum).unwrap();
        assert!((loss - 6.0 * nl.ln()).abs() < 1e-9);
        let mean = re_loss(&table, &gold, LossReduction::Mean).unwrap();
        assert!((mean - nl.ln()).abs() < 1e-9);
    }

    #[test]
    fn rigged_table_decodes_gold_cells() {
        let schema = schema();
        let gold = build_gold_table(&demo::example_sentence(), &schema).unwrap();
        let nl = schema.num_relation_labels();
        // Choose q/k so that cell (i,j) has a large logit exactly on the
        // gold label: q[i,r,:] one-hot by row, k[j,r,:] scaled by match.
        let n = gold.n;
        let mut q = Array3::zeros((n, nl, n));
        let mut k = Array3::zeros((n, nl, n));
        for i in 0..n {
            for r in 0..nl {
                q[[i, r, i]] = 1.0;
            }
        }
        for j in 0..n {
            for i in 0..j {
                let label = gold.cell(i, j);
                k[[j, label, i]] = 10.0;
            }
        }
        let table = score_all(&q, &k);
        let cells = decode_relations_once(&table);
        let fwd = schema.relation_label_id(RelationLabel::Forward(0));
        assert_eq!(cells.get(0, 4), fwd);
        assert_eq!(cells.get(1, 4), fwd);
        assert_eq!(cells.get(0, 1), NULL_RELATION_ID);

        let loss = re_loss(&table, &gold, LossReduction::Sum).unwrap();
        assert!(loss < 1e-3, "near-one-hot correct predictions, got {loss}");
    }

    #[test]
    fn three_word_loss_matches_hand_computation() {
        // n=3, two labels, d_att=1: logits are plain products.
        let q = Array3::from_shape_vec((3, 2, 1), vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let k = Array3::from_shape_vec((3, 2, 1), vec![2.0, 1.0, -0.5, 0.5, 1.5, -2.0]).unwrap();
        let table = score_all(&q, &k);
        let mut gold = LabelTable::empty(3);
        gold.set_cell(0, 2, 1).unwrap();
        let hand = |l0: f64, l1: f64, t: usize| {
            let m = l0.max(l1);
            m + ((l0 - m).exp() + (l1 - m).exp()).ln() - if t == 0 { l0 } else { l1 }
        };
        // cell (0,1): q0=(1,2), k1=(-0.5,0.5) -> logits (-0.5, 1.0), gold 0
        // cell (0,2): q0=(1,2), k2=(1.5,-2)   -> logits (1.5, -4.0), gold 1
        // cell (1,2): q1=(0.5,-1), k2=(1.5,-2)-> logits (0.75, 2.0), gold 0
        let expect = hand(-0.5, 1.0, 0) + hand(1.5, -4.0, 1) + hand(0.75, 2.0, 0);
        let loss = re_loss(&table, &gold, LossReduction::Sum).unwrap();
        assert!((loss - expect).abs() < 1e-9);
    }

    #[test]
    fn history_order_and_null_neighbors() {
        // With zeroed neighbor weights the history decode must equal the
        // plain argmax decode.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 5;
        let nl = 3;
        let q = Array3::from_shape_fn((n, nl, 2), |_| rng.gen_range(-1.0..1.0));
        let k = Array3::from_shape_fn((n, nl, 2), |_| rng.gen_range(-1.0..1.0));
        let hist = HistoryParams::zeros(nl, 4);
        let plain = decode_relations_once(&score_all(&q, &k));
        let seq = decode_relations_history(&q, &k, &hist);
        assert_eq!(plain, seq);

        // n=2: the single cell has only null neighbors; biasing the null
        // embedding toward label 2 flips the decision.
        let q2 = Array3::zeros((2, nl, 1));
        let k2 = Array3::zeros((2, nl, 1));
        let mut hist = HistoryParams::zeros(nl, 1);
        hist.rel_emb[[nl, 0]] = 1.0; // null row
        hist.w_left[[2, 0]] = 5.0;
        let cells = decode_relations_history(&q2, &k2, &hist);
        assert_eq!(cells.get(0, 1), 2);
    }

    #[test]
    fn decode_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 6;
        let nl = 4;
        let q = Array3::from_shape_fn((n, nl, 3), |_| rng.gen_range(-1.0..1.0));
        let k = Array3::from_shape_fn((n, nl, 3), |_| rng.gen_range(-1.0..1.0));
        let table = score_all(&q, &k);
        let once = decode_relations_once(&table);
        // evaluate cells in reverse order by hand
        let mut rev = CellLabels::filled(n, NULL_RELATION_ID);
        let cells: Vec<(usize, usize)> = table.cells().collect();
        for &(i, j) in cells.iter().rev() {
            rev.set(i, j, argmax(table.probs(i, j)));
        }
        assert_eq!(once, rev);
    }

    #[test]
    fn within_span_rows_score_identically_at_prediction() {
        let schema = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_model = 4;
        let d_label = 2;
        let words = Array2::from_shape_fn((4, d_model), |_| rng.gen_range(-1.0..1.0));
        let s = sent(words);
        let label_emb = Array2::from_shape_fn((schema.num_entity_labels(), d_label), |_| {
            rng.gen_range(-1.0..1.0)
        });
        let params = ReParams::init(schema.num_relation_labels(), d_model + d_label, 3, &mut rng);

        // 3-word span: the two interior positions share the BILOU label
        // only if we give them the same one; use Inside for both.
        let spans = vec![Span { start: 0, end: 4, etype: 0 }];
        let index = span_index(&spans, 4).unwrap();
        let inside = 2; // I-<type 0> by the id layout
        let mut h = Array2::zeros((4, d_model + d_label));
        for i in 0..4 {
            let z = span_feature(&s, i, &index, Phase::Predict);
            let label = if i == 1 || i == 2 { inside } else { 1 };
            let hi = rel_input(z.view(), label, label_emb.view()).unwrap();
            h.row_mut(i).assign(&hi);
        }
        assert_eq!(h.row(1), h.row(2));
        let (q, k) = build_qk(h.view(), &params).unwrap();
        let table = score_all(&q, &k);
        assert_eq!(
            table.probs(1, 3).to_owned(),
            table.probs(2, 3).to_owned()
        );
    }

    #[test]
    fn forward_train_uses_per_word_features() {
        let schema = schema();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gold = build_gold_table(&demo::example_sentence(), &schema).unwrap();
        let d_model = 3;
        let words = Array2::from_shape_fn((5, d_model), |_| rng.gen_range(-1.0..1.0));
        let s = sent(words);
        let label_emb =
            Array2::from_shape_fn((schema.num_entity_labels(), 2), |_| rng.gen_range(-1.0..1.0));
        let params = ReParams::init(schema.num_relation_labels(), d_model + 2, 2, &mut rng);
        let cache =
            re_forward_train(&s, &gold, label_emb.view(), &params, LossReduction::Sum, None)
                .unwrap();
        // rows 0 and 1 are inside the same gold span but must differ
        assert_ne!(cache.h.row(0), cache.h.row(1));
        assert!(cache.loss.is_finite());
        let spans = spans_from_bilou(&gold.diag, &schema, BilouRepair::GreedyRepair);
        assert_eq!(spans.len(), 2);
    }
}
