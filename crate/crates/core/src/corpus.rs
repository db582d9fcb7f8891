//! Corpus and annotation types shared by all modules, plus ingestion and
//! validation of the JSON-lines corpus format.
//!
//! One document per line:
//!
//! ```text
//! {"id": "d1", "sentences": [{"words": [...], "entities": [...], "relations": [...]}]}
//! ```
//!
//! Word indices are 0-based and end-exclusive everywhere inside this crate;
//! conversion from other conventions happens at the ingestion boundary only.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("document {doc} sentence {sentence}: empty word list")]
    EmptySentence { doc: String, sentence: usize },
    #[error("document {doc} sentence {sentence}: empty word at position {word}")]
    EmptyWord {
        doc: String,
        sentence: usize,
        word: usize,
    },
    #[error("document {doc} sentence {sentence}: ill-formed entity span ({start},{end}) for {n} words")]
    IllFormedSpan {
        doc: String,
        sentence: usize,
        start: usize,
        end: usize,
        n: usize,
    },
    #[error("document {doc} sentence {sentence}: entity spans ({a0},{a1}) and ({b0},{b1}) overlap")]
    OverlappingEntities {
        doc: String,
        sentence: usize,
        a0: usize,
        a1: usize,
        b0: usize,
        b1: usize,
    },
    #[error("document {doc} sentence {sentence}: relation references missing entity index {index}")]
    DanglingRelation {
        doc: String,
        sentence: usize,
        index: usize,
    },
    #[error("document {doc} sentence {sentence}: relation head and tail are the same entity {index}")]
    SelfRelation {
        doc: String,
        sentence: usize,
        index: usize,
    },
    #[error("document {doc}: unknown {kind} type {name:?}")]
    UnknownType {
        doc: String,
        kind: &'static str,
        name: String,
    },
    #[error("duplicate document id {0:?}")]
    DuplicateDocumentId(String),
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// An entity mention: word span `[start, end)` plus its type name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
}

/// A directed relation between two entities of the same sentence,
/// referenced by their index in the entity list. `head` is arg0,
/// `tail` is arg1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub head: usize,
    pub tail: usize,
    #[serde(rename = "type")]
    pub rtype: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub words: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<EntityAnnotation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub relations: Vec<RelationAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Sentence>,
}

impl Sentence {
    pub fn new(words: &[&str]) -> Self {
        Sentence {
            words: words.iter().map(|w| w.to_string()).collect(),
            entities: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Structural validation: span bounds, flat (non-overlapping) entities,
    /// relations referencing two distinct existing entities.
    fn validate(&self, doc: &str, index: usize) -> Result<(), CorpusError> {
        let n = self.words.len();
        if n == 0 {
            return Err(CorpusError::EmptySentence {
                doc: doc.to_string(),
                sentence: index,
            });
        }
        for (w, word) in self.words.iter().enumerate() {
            if word.is_empty() {
                return Err(CorpusError::EmptyWord {
                    doc: doc.to_string(),
                    sentence: index,
                    word: w,
                });
            }
        }
        for ent in &self.entities {
            if ent.start >= ent.end || ent.end > n {
                return Err(CorpusError::IllFormedSpan {
                    doc: doc.to_string(),
                    sentence: index,
                    start: ent.start,
                    end: ent.end,
                    n,
                });
            }
        }
        let mut sorted: Vec<&EntityAnnotation> = self.entities.iter().collect();
        sorted.sort_by_key(|e| (e.start, e.end));
        for pair in sorted.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(CorpusError::OverlappingEntities {
                    doc: doc.to_string(),
                    sentence: index,
                    a0: pair[0].start,
                    a1: pair[0].end,
                    b0: pair[1].start,
                    b1: pair[1].end,
                });
            }
        }
        for rel in &self.relations {
            for ent_idx in [rel.head, rel.tail] {
                if ent_idx >= self.entities.len() {
                    return Err(CorpusError::DanglingRelation {
                        doc: doc.to_string(),
                        sentence: index,
                        index: ent_idx,
                    });
                }
            }
            if rel.head == rel.tail {
                return Err(CorpusError::SelfRelation {
                    doc: doc.to_string(),
                    sentence: index,
                    index: rel.head,
                });
            }
        }
        Ok(())
    }
}

/// The label sets used by the heads: BILOU x entity-type labels for the
/// table diagonal, direction-tagged relation labels for the off-diagonal
/// cells. Label ids are dense, 0-based, and stable for a fixed type list.
///
/// Entity label ids: 0 is `O`; type `k` owns ids `4k+1..4k+4` in B, I, L, U
/// order. Relation label ids: 0 is the negative label; relation type `k`
/// owns `2k+1` (forward) and `2k+2` (backward).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    entity_types: Vec<String>,
    relation_types: Vec<String>,
}

/// BILOU position tag of a labeled word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BilouTag {
    Begin,
    Inside,
    Last,
    Unit,
}

/// A diagonal (entity) label: `O` or a BILOU tag with an entity-type index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntityLabel {
    Outside,
    Tagged(BilouTag, usize),
}

/// An off-diagonal (relation) label. `Forward(r)` points from the earlier
/// to the later span, `Backward(r)` the other way, `Null` means no relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationLabel {
    Null,
    Forward(usize),
    Backward(usize),
}

pub const OUTSIDE_ID: usize = 0;
pub const NULL_RELATION_ID: usize = 0;

impl LabelSchema {
    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>) -> Self {
        let mut entity_types = entity_types;
        let mut relation_types = relation_types;
        entity_types.sort();
        entity_types.dedup();
        relation_types.sort();
        relation_types.dedup();
        LabelSchema {
            entity_types,
            relation_types,
        }
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn relation_types(&self) -> &[String] {
        &self.relation_types
    }

    /// Number of diagonal labels: 4 per entity type plus `O`.
    pub fn num_entity_labels(&self) -> usize {
        4 * self.entity_types.len() + 1
    }

    /// Number of cell labels: forward and backward per relation type plus
    /// the negative label.
    pub fn num_relation_labels(&self) -> usize {
        2 * self.relation_types.len() + 1
    }

    pub fn entity_type_index(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn relation_type_index(&self, name: &str) -> Option<usize> {
        self.relation_types.iter().position(|t| t == name)
    }

    pub fn entity_label_id(&self, label: EntityLabel) -> usize {
        match label {
            EntityLabel::Outside => OUTSIDE_ID,
            EntityLabel::Tagged(tag, ty) => {
                debug_assert!(ty < self.entity_types.len());
                let offset = match tag {
                    BilouTag::Begin => 0,
                    BilouTag::Inside => 1,
                    BilouTag::Last => 2,
                    BilouTag::Unit => 3,
                };
                4 * ty + offset + 1
            }
        }
    }

    pub fn entity_label(&self, id: usize) -> EntityLabel {
        assert!(id < self.num_entity_labels(), "entity label id {id} out of range");
        if id == OUTSIDE_ID {
            return EntityLabel::Outside;
        }
        let ty = (id - 1) / 4;
        let tag = match (id - 1) % 4 {
            0 => BilouTag::Begin,
            1 => BilouTag::Inside,
            2 => BilouTag::Last,
            _ => BilouTag::Unit,
        };
        EntityLabel::Tagged(tag, ty)
    }

    pub fn relation_label_id(&self, label: RelationLabel) -> usize {
        match label {
            RelationLabel::Null => NULL_RELATION_ID,
            RelationLabel::Forward(r) => 2 * r + 1,
            RelationLabel::Backward(r) => 2 * r + 2,
        }
    }

    pub fn relation_label(&self, id: usize) -> RelationLabel {
        assert!(
            id < self.num_relation_labels(),
            "relation label id {id} out of range"
        );
        if id == NULL_RELATION_ID {
            return RelationLabel::Null;
        }
        let r = (id - 1) / 2;
        if (id - 1) % 2 == 0 {
            RelationLabel::Forward(r)
        } else {
            RelationLabel::Backward(r)
        }
    }

    pub fn entity_label_name(&self, id: usize) -> String {
        match self.entity_label(id) {
            EntityLabel::Outside => "O".to_string(),
            EntityLabel::Tagged(tag, ty) => {
                let prefix = match tag {
                    BilouTag::Begin => 'B',
                    BilouTag::Inside => 'I',
                    BilouTag::Last => 'L',
                    BilouTag::Unit => 'U',
                };
                format!("{}-{}", prefix, self.entity_types[ty])
            }
        }
    }

    pub fn relation_label_name(&self, id: usize) -> String {
        match self.relation_label(id) {
            RelationLabel::Null => "\u{22a5}".to_string(),
            RelationLabel::Forward(r) => format!("\u{2192}{}", self.relation_types[r]),
            RelationLabel::Backward(r) => format!("\u{2190}{}", self.relation_types[r]),
        }
    }

    fn check_document(&self, doc: &Document) -> Result<(), CorpusError> {
        for sentence in &doc.sentences {
            for ent in &sentence.entities {
                if self.entity_type_index(&ent.etype).is_none() {
                    return Err(CorpusError::UnknownType {
                        doc: doc.id.clone(),
                        kind: "entity",
                        name: ent.etype.clone(),
                    });
                }
            }
            for rel in &sentence.relations {
                if self.relation_type_index(&rel.rtype).is_none() {
                    return Err(CorpusError::UnknownType {
                        doc: doc.id.clone(),
                        kind: "relation",
                        name: rel.rtype.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "entities: {:?}, relations: {:?}",
            self.entity_types, self.relation_types
        )
    }
}

/// Parse and structurally validate a JSON-lines corpus, without checking
/// type names against a schema. Blank lines are ignored.
pub fn parse_documents(text: &str) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|source| CorpusError::Parse {
            line: lineno + 1,
            source,
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(CorpusError::DuplicateDocumentId(doc.id));
        }
        for (s, sentence) in doc.sentences.iter().enumerate() {
            sentence.validate(&doc.id, s)?;
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Load a validated corpus whose entity and relation types must all be
/// known to `schema`.
pub fn load_corpus(path: &Path, schema: &LabelSchema) -> Result<Vec<Document>, CorpusError> {
    let docs = load_documents(path)?;
    for doc in &docs {
        schema.check_document(doc)?;
    }
    Ok(docs)
}

/// Load a structurally validated corpus without a schema check.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_documents(&text)
}

/// Canonical one-document-per-line serialization. Keys are emitted in
/// declaration order, so re-serializing a parsed corpus is stable.
pub fn corpus_to_string(docs: &[Document]) -> String {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("document serialization cannot fail"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    fs::write(path, corpus_to_string(docs))?;
    Ok(())
}

/// Collect the sorted entity and relation type sets observed in a corpus.
pub fn schema_from_corpus(docs: &[Document]) -> Result<LabelSchema, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut entity_types = BTreeSet::new();
    let mut relation_types = BTreeSet::new();
    for doc in docs {
        for sentence in &doc.sentences {
            for ent in &sentence.entities {
                entity_types.insert(ent.etype.clone());
            }
            for rel in &sentence.relations {
                relation_types.insert(rel.rtype.clone());
            }
        }
    }
    Ok(LabelSchema::new(
        entity_types.into_iter().collect(),
        relation_types.into_iter().collect(),
    ))
}
