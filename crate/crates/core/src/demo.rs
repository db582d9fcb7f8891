//! Small built-in fixtures: a canonical annotated example sentence and a
//! tiny synthetic corpus that a toy-scale model can memorize. Used by the
//! overfit tests, the CLI smoke configs, and the browser demo.

use crate::corpus::{Document, EntityAnnotation, RelationAnnotation, Sentence};

/// "Johanson Smith lives in London" with a two-word Person span, a unit
/// Location span, and one LiveIn relation from the person to the place.
pub fn example_sentence() -> Sentence {
    Sentence {
        words: ["Johanson", "Smith", "lives", "in", "London"]
            .iter()
            .map(|w| w.to_string())
            .collect(),
        entities: vec![
            EntityAnnotation {
                start: 0,
                end: 2,
                etype: "Person".to_string(),
            },
            EntityAnnotation {
                start: 4,
                end: 5,
                etype: "Location".to_string(),
            },
        ],
        relations: vec![RelationAnnotation {
            head: 0,
            tail: 1,
            rtype: "LiveIn".to_string(),
        }],
    }
}

pub fn example_document() -> Document {
    Document {
        id: "example".to_string(),
        sentences: vec![example_sentence()],
    }
}

fn sent(
    words: &[&str],
    entities: &[(usize, usize, &str)],
    relations: &[(usize, usize, &str)],
) -> Sentence {
    Sentence {
        words: words.iter().map(|w| w.to_string()).collect(),
        entities: entities
            .iter()
            .map(|&(start, end, etype)| EntityAnnotation {
                start,
                end,
                etype: etype.to_string(),
            })
            .collect(),
        relations: relations
            .iter()
            .map(|&(head, tail, rtype)| RelationAnnotation {
                head,
                tail,
                rtype: rtype.to_string(),
            })
            .collect(),
    }
}

/// Ten short sentences over three entity types (Person, Location, Org) and
/// two relation types (LiveIn, WorksFor). Span lengths vary between one and
/// two words and relations point in both surface directions, so the corpus
/// exercises every BILOU tag and both cell label directions.
pub fn tiny_corpus() -> Vec<Document> {
    let sentences = vec![
        sent(
            &["anna", "maria", "lives", "in", "berlin"],
            &[(0, 2, "Person"), (4, 5, "Location")],
            &[(0, 1, "LiveIn")],
        ),
        sent(
            &["berlin", "hosts", "carl"],
            &[(0, 1, "Location"), (2, 3, "Person")],
            &[(1, 0, "LiveIn")],
        ),
        sent(
            &["dora", "works", "at", "acme", "corp"],
            &[(0, 1, "Person"), (3, 5, "Org")],
            &[(0, 1, "WorksFor")],
        ),
        sent(
            &["acme", "corp", "hired", "erik", "stone"],
            &[(0, 2, "Org"), (3, 5, "Person")],
            &[(1, 0, "WorksFor")],
        ),
        sent(
            &["frank", "visited", "rome"],
            &[(0, 1, "Person"), (2, 3, "Location")],
            &[],
        ),
        sent(
            &["gina", "moved", "to", "oslo"],
            &[(0, 1, "Person"), (3, 4, "Location")],
            &[(0, 1, "LiveIn")],
        ),
        sent(
            &["henry", "quit", "globex"],
            &[(0, 1, "Person"), (2, 3, "Org")],
            &[(0, 1, "WorksFor")],
        ),
        sent(
            &["iris", "and", "jonas", "met"],
            &[(0, 1, "Person"), (2, 3, "Person")],
            &[],
        ),
        sent(
            &["karl", "lives", "in", "lima", "peru"],
            &[(0, 1, "Person"), (3, 5, "Location")],
            &[(0, 1, "LiveIn")],
        ),
        sent(
            &["lucy", "joined", "omega", "labs", "in", "quito"],
            &[(0, 1, "Person"), (2, 4, "Org"), (5, 6, "Location")],
            &[(0, 1, "WorksFor"), (0, 2, "LiveIn")],
        ),
    ];
    sentences
        .into_iter()
        .enumerate()
        .map(|(i, s)| Document {
            id: format!("tiny-{i}"),
            sentences: vec![s],
        })
        .collect()
}
