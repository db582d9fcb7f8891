//! The upper-triangular label table: building the gold table from
//! annotations (span-wise relation mapping) and converting predicted
//! tables back into entity spans and relation triples.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    BilouTag, EntityLabel, LabelSchema, RelationLabel, Sentence, NULL_RELATION_ID, OUTSIDE_ID,
};

#[derive(Debug, Error)]
pub enum TableError {
    #[error("entity spans ({a0},{a1}) and ({b0},{b1}) overlap")]
    OverlappingSpans { a0: usize, a1: usize, b0: usize, b1: usize },
    #[error("neither relation argument ({a0},{a1}) / ({b0},{b1}) wholly precedes the other")]
    InterleavedSpans { a0: usize, a1: usize, b0: usize, b1: usize },
    #[error("cell ({i},{j}) already carries a different relation label")]
    ConflictingRelationCell { i: usize, j: usize },
    #[error("span ({start},{end}) out of range for sentence of {n} words")]
    SpanOutOfRange { start: usize, end: usize, n: usize },
    #[error("unknown entity type {0:?}")]
    UnknownEntityType(String),
    #[error("unknown relation type {0:?}")]
    UnknownRelationType(String),
}

/// An entity span with a resolved type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub etype: usize,
}

/// A relation triple between two resolved spans. `head` is arg0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: Span,
    pub tail: Span,
    pub rtype: usize,
}

/// The `n x n` upper-triangular label table. The diagonal holds entity
/// label ids; strictly-upper cells hold relation label ids, with absent
/// cells meaning the negative label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTable {
    pub n: usize,
    pub diag: Vec<usize>,
    rel: BTreeMap<(usize, usize), usize>,
}

impl LabelTable {
    pub fn empty(n: usize) -> Self {
        LabelTable {
            n,
            diag: vec![OUTSIDE_ID; n],
            rel: BTreeMap::new(),
        }
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        assert!(i < j && j < self.n, "cell ({i},{j}) is not strictly upper-triangular");
        self.rel.get(&(i, j)).copied().unwrap_or(NULL_RELATION_ID)
    }

    pub fn set_cell(&mut self, i: usize, j: usize, label: usize) -> Result<(), TableError> {
        assert!(i < j && j < self.n, "cell ({i},{j}) is not strictly upper-triangular");
        if label == NULL_RELATION_ID {
            return Ok(());
        }
        match self.rel.insert((i, j), label) {
            Some(prev) if prev != label => Err(TableError::ConflictingRelationCell { i, j }),
            _ => Ok(()),
        }
    }

    /// Non-negative cells only, in row-major order.
    pub fn labeled_cells(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.rel.iter().map(|(&(i, j), &l)| (i, j, l))
    }

    pub fn num_labeled_cells(&self) -> usize {
        self.rel.len()
    }
}

/// Per-position start (`first`) and inclusive end (`last`) of the
/// enclosing entity span; positions outside any span are unit spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanIndex {
    pub first: Vec<usize>,
    pub last: Vec<usize>,
}

/// How ill-formed BILOU sequences are turned into spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilouRepair {
    /// Only well-formed `B I* L` and `U` patterns become spans.
    StrictDrop,
    /// Every labeled position lands in some span: `B` opens, `I` extends
    /// (or opens after a close or a type change), `O`/`L`/`U` close.
    #[default]
    GreedyRepair,
}

/// How the block of word-pair cells between two spans is reduced to one
/// relation label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelAggregation {
    /// Read the single cell at (last of earlier span, last of later span).
    #[default]
    LastLastCell,
    /// Modal non-negative label across the block, ties to the lowest id.
    MajorityVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecodePolicy {
    #[serde(default)]
    pub bilou_repair: BilouRepair,
    #[serde(default)]
    pub rel_aggregation: RelAggregation,
}

/// BILOU-encode a span onto the diagonal.
fn encode_span(diag: &mut [usize], span: &Span, schema: &LabelSchema) {
    let ty = span.etype;
    if span.end - span.start == 1 {
        diag[span.start] = schema.entity_label_id(EntityLabel::Tagged(BilouTag::Unit, ty));
        return;
    }
    diag[span.start] = schema.entity_label_id(EntityLabel::Tagged(BilouTag::Begin, ty));
    for i in span.start + 1..span.end - 1 {
        diag[i] = schema.entity_label_id(EntityLabel::Tagged(BilouTag::Inside, ty));
    }
    diag[span.end - 1] = schema.entity_label_id(EntityLabel::Tagged(BilouTag::Last, ty));
}

/// Resolve a sentence's annotations against the schema.
pub fn resolve_spans(sentence: &Sentence, schema: &LabelSchema) -> Result<Vec<Span>, TableError> {
    sentence
        .entities
        .iter()
        .map(|e| {
            let etype = schema
                .entity_type_index(&e.etype)
                .ok_or_else(|| TableError::UnknownEntityType(e.etype.clone()))?;
            Ok(Span { start: e.start, end: e.end, etype })
        })
        .collect()
}

/// Resolve a sentence's relation annotations into span-level triples.
pub fn resolve_triples(sentence: &Sentence, schema: &LabelSchema) -> Result<Vec<Triple>, TableError> {
    let spans = resolve_spans(sentence, schema)?;
    sentence
        .relations
        .iter()
        .map(|r| {
            let rtype = schema
                .relation_type_index(&r.rtype)
                .ok_or_else(|| TableError::UnknownRelationType(r.rtype.clone()))?;
            Ok(Triple { head: spans[r.head], tail: spans[r.tail], rtype })
        })
        .collect()
}

/// Build the gold table: BILOU labels on the diagonal, every relation
/// replicated span-wise onto the cross product of its argument spans.
pub fn build_gold_table(sentence: &Sentence, schema: &LabelSchema) -> Result<LabelTable, TableError> {
    let n = sentence.words.len();
    let spans = resolve_spans(sentence, schema)?;

    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(TableError::OverlappingSpans {
                a0: pair[0].start,
                a1: pair[0].end,
                b0: pair[1].start,
                b1: pair[1].end,
            });
        }
    }

    let mut table = LabelTable::empty(n);
    for span in &spans {
        if span.end > n {
            return Err(TableError::SpanOutOfRange { start: span.start, end: span.end, n });
        }
        encode_span(&mut table.diag, span, schema);
    }

    for rel in &sentence.relations {
        let rtype = schema
            .relation_type_index(&rel.rtype)
            .ok_or_else(|| TableError::UnknownRelationType(rel.rtype.clone()))?;
        let head = spans[rel.head];
        let tail = spans[rel.tail];
        let (earlier, later, label) = if head.end <= tail.start {
            (head, tail, RelationLabel::Forward(rtype))
        } else if tail.end <= head.start {
            (tail, head, RelationLabel::Backward(rtype))
        } else {
            return Err(TableError::InterleavedSpans {
                a0: head.start,
                a1: head.end,
                b0: tail.start,
                b1: tail.end,
            });
        };
        let id = schema.relation_label_id(label);
        for i in earlier.start..earlier.end {
            for j in later.start..later.end {
                table.set_cell(i, j, id)?;
            }
        }
    }
    Ok(table)
}

/// Decode a diagonal label sequence into spans under the given repair
/// policy. Output spans are sorted and non-overlapping; on well-formed
/// input both policies reproduce the encoded span set exactly.
pub fn spans_from_bilou(diag: &[usize], schema: &LabelSchema, policy: BilouRepair) -> Vec<Span> {
    match policy {
        BilouRepair::StrictDrop => strict_spans(diag, schema),
        BilouRepair::GreedyRepair => greedy_spans(diag, schema),
    }
}

fn strict_spans(diag: &[usize], schema: &LabelSchema) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < diag.len() {
        match schema.entity_label(diag[i]) {
            EntityLabel::Tagged(BilouTag::Unit, ty) => {
                spans.push(Span { start: i, end: i + 1, etype: ty });
                i += 1;
            }
            EntityLabel::Tagged(BilouTag::Begin, ty) => {
                // Look for I-ty* L-ty; on any break, drop position i only.
                let mut j = i + 1;
                while j < diag.len()
                    && schema.entity_label(diag[j]) == EntityLabel::Tagged(BilouTag::Inside, ty)
                {
                    j += 1;
                }
                if j < diag.len()
                    && schema.entity_label(diag[j]) == EntityLabel::Tagged(BilouTag::Last, ty)
                {
                    spans.push(Span { start: i, end: j + 1, etype: ty });
                    i = j + 1;
                } else {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    spans
}

fn greedy_spans(diag: &[usize], schema: &LabelSchema) -> Vec<Span> {
    let mut tracker = SpanTracker::new();
    for &label in diag {
        tracker.push(schema.entity_label(label));
    }
    tracker.finish()
}

/// Online span state over a (possibly ill-formed) BILOU stream, shared by
/// the offline greedy decode and the sequential tagger's history feature.
/// `O`, `L`, and `U` close the open span, `B` opens one, `I` extends the
/// open span of the same type and otherwise opens its own.
#[derive(Debug, Clone)]
pub struct SpanTracker {
    pos: usize,
    open: Option<(usize, usize)>, // (start, etype) of a span still accepting I/L
    spans: Vec<Span>,
    first: Vec<usize>,
}

impl Default for SpanTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl SpanTracker {
    pub fn new() -> Self {
        SpanTracker { pos: 0, open: None, spans: Vec::new(), first: Vec::new() }
    }

    fn close_open(&mut self) {
        if let Some((start, etype)) = self.open.take() {
            self.spans.push(Span { start, end: self.pos, etype });
        }
    }

    /// Consume the label at the next position.
    pub fn push(&mut self, label: EntityLabel) {
        let i = self.pos;
        match label {
            EntityLabel::Outside => {
                self.close_open();
                self.first.push(i);
            }
            EntityLabel::Tagged(BilouTag::Unit, ty) => {
                self.close_open();
                self.first.push(i);
                self.pos += 1;
                self.spans.push(Span { start: i, end: i + 1, etype: ty });
                return;
            }
            EntityLabel::Tagged(BilouTag::Begin, ty) => {
                self.close_open();
                self.first.push(i);
                self.open = Some((i, ty));
            }
            EntityLabel::Tagged(BilouTag::Inside, ty) => match self.open {
                Some((start, open_ty)) if open_ty == ty => self.first.push(start),
                _ => {
                    self.close_open();
                    self.first.push(i);
                    self.open = Some((i, ty));
                }
            },
            EntityLabel::Tagged(BilouTag::Last, ty) => {
                match self.open {
                    Some((start, open_ty)) if open_ty == ty => {
                        self.first.push(start);
                        self.open = None;
                        self.pos += 1;
                        self.spans.push(Span { start, end: i + 1, etype: ty });
                        return;
                    }
                    _ => {
                        self.close_open();
                        self.first.push(i);
                        self.pos += 1;
                        self.spans.push(Span { start: i, end: i + 1, etype: ty });
                        return;
                    }
                }
            }
        }
        self.pos += 1;
    }

    /// Start of the span containing position `i`, among positions pushed
    /// so far.
    pub fn first(&self, i: usize) -> usize {
        self.first[i]
    }

    pub fn finish(mut self) -> Vec<Span> {
        self.close_open();
        self.spans
    }
}

/// Per-position first/last index over a set of non-overlapping spans;
/// positions outside every span get unit spans.
pub fn span_index(spans: &[Span], n: usize) -> Result<SpanIndex, TableError> {
    let mut first: Vec<usize> = (0..n).collect();
    let mut last: Vec<usize> = (0..n).collect();
    for span in spans {
        if span.start >= span.end || span.end > n {
            return Err(TableError::SpanOutOfRange { start: span.start, end: span.end, n });
        }
        for i in span.start..span.end {
            first[i] = span.start;
            last[i] = span.end - 1;
        }
    }
    Ok(SpanIndex { first, last })
}

/// Dense per-cell label assignment for the strict upper triangle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellLabels {
    pub n: usize,
    labels: Vec<usize>,
}

impl CellLabels {
    pub fn filled(n: usize, label: usize) -> Self {
        CellLabels { n, labels: vec![label; n * n] }
    }

    pub fn from_table(table: &LabelTable) -> Self {
        let mut cells = CellLabels::filled(table.n, NULL_RELATION_ID);
        for (i, j, l) in table.labeled_cells() {
            cells.set(i, j, l);
        }
        cells
    }

    pub fn get(&self, i: usize, j: usize) -> usize {
        assert!(i < j && j < self.n);
        self.labels[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, label: usize) {
        assert!(i < j && j < self.n);
        self.labels[i * self.n + j] = label;
    }
}

/// Reduce per-cell labels to entity-level triples. For each ordered span
/// pair the block of cells between them is aggregated per the policy;
/// a forward label makes the earlier span the head, a backward label the
/// tail, and the negative label emits nothing.
pub fn triples_from_cells(
    cells: &CellLabels,
    spans: &[Span],
    schema: &LabelSchema,
    policy: RelAggregation,
) -> Vec<Triple> {
    let mut ordered: Vec<&Span> = spans.iter().collect();
    ordered.sort();
    let mut out = Vec::new();
    for (a, &s1) in ordered.iter().enumerate() {
        for &s2 in ordered.iter().skip(a + 1) {
            let label = match policy {
                RelAggregation::LastLastCell => cells.get(s1.end - 1, s2.end - 1),
                RelAggregation::MajorityVote => {
                    let mut counts = BTreeMap::new();
                    for i in s1.start..s1.end {
                        for j in s2.start..s2.end {
                            let l = cells.get(i, j);
                            if l != NULL_RELATION_ID {
                                *counts.entry(l).or_insert(0usize) += 1;
                            }
                        }
                    }
                    counts
                        .iter()
                        .max_by_key(|&(label, count)| (*count, std::cmp::Reverse(*label)))
                        .map(|(&label, _)| label)
                        .unwrap_or(NULL_RELATION_ID)
                }
            };
            match schema.relation_label(label) {
                RelationLabel::Null => {}
                RelationLabel::Forward(r) => out.push(Triple { head: *s1, tail: *s2, rtype: r }),
                RelationLabel::Backward(r) => out.push(Triple { head: *s2, tail: *s1, rtype: r }),
            }
        }
    }
    out
}

/// Plain-text rendering of the upper triangle, one row per word, negative
/// cells shown as ".".
pub fn render_table(table: &LabelTable, words: &[String], schema: &LabelSchema) -> String {
    let n = table.n;
    let mut grid: Vec<Vec<String>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = vec![String::new(); n + 1];
        row[0] = words.get(i).cloned().unwrap_or_default();
        row[i + 1] = schema.entity_label_name(table.diag[i]);
        for j in i + 1..n {
            let cell = table.cell(i, j);
            row[j + 1] = if cell == NULL_RELATION_ID {
                ".".to_string()
            } else {
                schema.relation_label_name(cell)
            };
        }
        grid.push(row);
    }
    let mut widths = vec![0usize; n + 1];
    for row in &grid {
        for (c, cell) in row.iter().enumerate() {
            widths[c] = widths[c].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for (i, row) in grid.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if c > i && c != 0 && cell.is_empty() {
                continue;
            }
            let pad = widths[c].saturating_sub(cell.chars().count());
            out.push_str(cell);
            for _ in 0..pad {
                out.push(' ');
            }
            if c < n {
                out.push_str("  ");
            }
        }
        while out.ends_with(' ') {
            out.pop();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSchema, RelationAnnotation, Sentence};
    use crate::demo;

    fn fig_schema() -> LabelSchema {
        LabelSchema::new(
            vec!["Person".into(), "Location".into()],
            vec!["LiveIn".into()],
        )
    }

    fn eid(schema: &LabelSchema, name: &str) -> usize {
        (0..schema.num_entity_labels())
            .find(|&id| schema.entity_label_name(id) == name)
            .unwrap_or_else(|| panic!("no label {name}"))
    }

    #[test]
    fn gold_table_for_example_sentence() {
        let schema = fig_schema();
        let table = build_gold_table(&demo::example_sentence(), &schema).unwrap();
        let names: Vec<String> = table
            .diag
            .iter()
            .map(|&id| schema.entity_label_name(id))
            .collect();
        assert_eq!(names, ["B-Person", "L-Person", "O", "O", "U-Location"]);
        let fwd = schema.relation_label_id(RelationLabel::Forward(0));
        assert_eq!(table.cell(0, 4), fwd);
        assert_eq!(table.cell(1, 4), fwd);
        assert_eq!(table.num_labeled_cells(), 2);
        for (i, j) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4)] {
            assert_eq!(table.cell(i, j), NULL_RELATION_ID);
        }
    }

    #[test]
    fn unannotated_sentence_gives_empty_table() {
        let schema = fig_schema();
        let sent = Sentence::new(&["just", "words"]);
        let table = build_gold_table(&sent, &schema).unwrap();
        assert!(table.diag.iter().all(|&d| d == OUTSIDE_ID));
        assert_eq!(table.num_labeled_cells(), 0);
    }

    #[test]
    fn span_wise_mapping_covers_cross_product() {
        let schema = fig_schema();
        let mut sent = Sentence::new(&["a", "b", "c", "d", "e"]);
        sent.entities = vec![
            crate::corpus::EntityAnnotation { start: 0, end: 2, etype: "Person".into() },
            crate::corpus::EntityAnnotation { start: 3, end: 5, etype: "Location".into() },
        ];
        sent.relations = vec![RelationAnnotation { head: 0, tail: 1, rtype: "LiveIn".into() }];
        let table = build_gold_table(&sent, &schema).unwrap();
        let labeled: Vec<(usize, usize)> = table.labeled_cells().map(|(i, j, _)| (i, j)).collect();
        assert_eq!(labeled, [(0, 3), (0, 4), (1, 3), (1, 4)]);
    }

    #[test]
    fn backward_relation_uses_reversed_label() {
        let schema = fig_schema();
        let mut sent = Sentence::new(&["london", "greets", "ann"]);
        sent.entities = vec![
            crate::corpus::EntityAnnotation { start: 0, end: 1, etype: "Location".into() },
            crate::corpus::EntityAnnotation { start: 2, end: 3, etype: "Person".into() },
        ];
        // head is the later span, so the cell gets the backward label
        sent.relations = vec![RelationAnnotation { head: 1, tail: 0, rtype: "LiveIn".into() }];
        let table = build_gold_table(&sent, &schema).unwrap();
        assert_eq!(
            table.cell(0, 2),
            schema.relation_label_id(RelationLabel::Backward(0))
        );
    }

    #[test]
    fn conflicting_cell_rejected() {
        let schema = LabelSchema::new(vec!["P".into()], vec!["r1".into(), "r2".into()]);
        let mut sent = Sentence::new(&["a", "b"]);
        sent.entities = vec![
            crate::corpus::EntityAnnotation { start: 0, end: 1, etype: "P".into() },
            crate::corpus::EntityAnnotation { start: 1, end: 2, etype: "P".into() },
        ];
        sent.relations = vec![
            RelationAnnotation { head: 0, tail: 1, rtype: "r1".into() },
            RelationAnnotation { head: 1, tail: 0, rtype: "r2".into() },
        ];
        assert!(matches!(
            build_gold_table(&sent, &schema),
            Err(TableError::ConflictingRelationCell { i: 0, j: 1 })
        ));
    }

    #[test]
    fn bilou_decode_examples() {
        let schema = fig_schema();
        let diag = vec![
            eid(&schema, "B-Person"),
            eid(&schema, "L-Person"),
            OUTSIDE_ID,
            OUTSIDE_ID,
            eid(&schema, "U-Location"),
        ];
        let per = schema.entity_type_index("Person").unwrap();
        let loc = schema.entity_type_index("Location").unwrap();
        let expect = vec![
            Span { start: 0, end: 2, etype: per },
            Span { start: 4, end: 5, etype: loc },
        ];
        assert_eq!(spans_from_bilou(&diag, &schema, BilouRepair::StrictDrop), expect);
        assert_eq!(spans_from_bilou(&diag, &schema, BilouRepair::GreedyRepair), expect);

        let all_o = vec![OUTSIDE_ID; 4];
        assert!(spans_from_bilou(&all_o, &schema, BilouRepair::StrictDrop).is_empty());
        assert!(spans_from_bilou(&all_o, &schema, BilouRepair::GreedyRepair).is_empty());

        // Ill-formed: B-Per O L-Per
        let broken = vec![eid(&schema, "B-Person"), OUTSIDE_ID, eid(&schema, "L-Person")];
        assert!(spans_from_bilou(&broken, &schema, BilouRepair::StrictDrop).is_empty());
        assert_eq!(
            spans_from_bilou(&broken, &schema, BilouRepair::GreedyRepair),
            vec![
                Span { start: 0, end: 1, etype: per },
                Span { start: 2, end: 3, etype: per },
            ]
        );
    }

    #[test]
    fn greedy_repair_respects_boundaries_of_wellformed_spans() {
        let schema = fig_schema();
        let per = schema.entity_type_index("Person").unwrap();
        // Two adjacent well-formed spans of the same type must not merge.
        let diag = vec![
            eid(&schema, "B-Person"),
            eid(&schema, "L-Person"),
            eid(&schema, "B-Person"),
            eid(&schema, "L-Person"),
        ];
        assert_eq!(
            spans_from_bilou(&diag, &schema, BilouRepair::GreedyRepair),
            vec![
                Span { start: 0, end: 2, etype: per },
                Span { start: 2, end: 4, etype: per },
            ]
        );
        // Type change inside a run splits it.
        let mixed = vec![eid(&schema, "I-Person"), eid(&schema, "I-Location")];
        let spans = spans_from_bilou(&mixed, &schema, BilouRepair::GreedyRepair);
        assert_eq!(spans.len(), 2);
    }

    #[test]
    fn span_index_examples() {
        let schema = fig_schema();
        let per = schema.entity_type_index("Person").unwrap();
        let loc = schema.entity_type_index("Location").unwrap();
        let spans = vec![
            Span { start: 0, end: 2, etype: per },
            Span { start: 4, end: 5, etype: loc },
        ];
        let idx = span_index(&spans, 5).unwrap();
        assert_eq!(idx.first, [0, 0, 2, 3, 4]);
        assert_eq!(idx.last, [1, 1, 2, 3, 4]);

        let idx = span_index(&[], 3).unwrap();
        assert_eq!(idx.first, [0, 1, 2]);
        assert_eq!(idx.last, [0, 1, 2]);

        let idx = span_index(&[Span { start: 0, end: 4, etype: 0 }], 4).unwrap();
        assert_eq!(idx.first, [0, 0, 0, 0]);
        assert_eq!(idx.last, [3, 3, 3, 3]);

        assert!(span_index(&[Span { start: 2, end: 6, etype: 0 }], 4).is_err());
    }

    #[test]
    fn triples_from_gold_cells() {
        let schema = fig_schema();
        let table = build_gold_table(&demo::example_sentence(), &schema).unwrap();
        let spans = spans_from_bilou(&table.diag, &schema, BilouRepair::GreedyRepair);
        let cells = CellLabels::from_table(&table);
        for policy in [RelAggregation::LastLastCell, RelAggregation::MajorityVote] {
            let triples = triples_from_cells(&cells, &spans, &schema, policy);
            assert_eq!(triples.len(), 1);
            assert_eq!(triples[0].head.start, 0);
            assert_eq!(triples[0].tail.start, 4);
            assert_eq!(triples[0].rtype, 0);
        }
    }

    #[test]
    fn aggregation_policies_differ_on_partial_blocks() {
        let schema = fig_schema();
        let per = schema.entity_type_index("Person").unwrap();
        let spans = vec![
            Span { start: 0, end: 2, etype: per },
            Span { start: 3, end: 4, etype: per },
        ];
        let mut cells = CellLabels::filled(4, NULL_RELATION_ID);
        cells.set(0, 3, schema.relation_label_id(RelationLabel::Forward(0)));
        // cell (1,3) stays negative; last-last reads it and emits nothing
        assert!(triples_from_cells(&cells, &spans, &schema, RelAggregation::LastLastCell).is_empty());
        let voted = triples_from_cells(&cells, &spans, &schema, RelAggregation::MajorityVote);
        assert_eq!(voted.len(), 1);
        assert_eq!(voted[0].rtype, 0);
    }

    #[test]
    fn all_negative_cells_emit_nothing() {
        let schema = fig_schema();
        let spans = vec![
            Span { start: 0, end: 1, etype: 0 },
            Span { start: 1, end: 2, etype: 0 },
        ];
        let cells = CellLabels::filled(2, NULL_RELATION_ID);
        for policy in [RelAggregation::LastLastCell, RelAggregation::MajorityVote] {
            assert!(triples_from_cells(&cells, &spans, &schema, policy).is_empty());
        }
    }

    #[test]
    fn majority_vote_tie_breaks_to_lowest_id() {
        let schema = LabelSchema::new(vec!["P".into()], vec!["r1".into(), "r2".into()]);
        let spans = vec![
            Span { start: 0, end: 2, etype: 0 },
            Span { start: 2, end: 4, etype: 0 },
        ];
        let a = schema.relation_label_id(RelationLabel::Forward(0));
        let b = schema.relation_label_id(RelationLabel::Forward(1));
        let mut cells = CellLabels::filled(4, NULL_RELATION_ID);
        cells.set(0, 2, b);
        cells.set(0, 3, a);
        cells.set(1, 2, b);
        cells.set(1, 3, a);
        let triples = triples_from_cells(&cells, &spans, &schema, RelAggregation::MajorityVote);
        assert_eq!(triples.len(), 1);
        assert_eq!(triples[0].rtype, 0);
    }

    #[test]
    fn render_matches_layout() {
        let schema = fig_schema();
        let sent = demo::example_sentence();
        let table = build_gold_table(&sent, &schema).unwrap();
        let text = render_table(&table, &sent.words, &schema);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].contains("B-Person"));
        assert!(lines[0].contains("\u{2192}LiveIn"));
        assert!(lines[2].contains("O"));
        assert!(lines[4].trim_end().ends_with("U-Location"));
    }
}
