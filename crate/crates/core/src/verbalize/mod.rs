//! Text templates for queries and triples, and the subword tokenizer.

pub mod tokenizer;

pub use tokenizer::{
    train_tokenizer, SegmentCache, TokenizedSeq, Vocabulary, CLS, DEFAULT_VOCAB_SIZE, EOS, MAX_LEN, PAD, SEP, UNK,
};

use crate::kg::{Direction, EntityId, MentionTable, Orientation, RelationId, Triple};

/// `"Predict tail: <s(e)> | <s(r)>"`, or the `head` form.
pub fn verbalize_query(e: EntityId, r: RelationId, direction: Direction, m: &MentionTable) -> String {
    format!(
        "Predict {}: {} | {}",
        direction.as_str(),
        m.entity(e).trim(),
        m.relation(r).trim()
    )
}

/// `"[CLS] <s(h)> | <s(r)> | <s(t)>"`.
pub fn verbalize_triple(t: &Triple, m: &MentionTable) -> String {
    format!(
        "[CLS] {} | {} | {}",
        m.entity(t.head).trim(),
        m.relation(t.relation).trim(),
        m.entity(t.tail).trim()
    )
}

/// One neighbor fact seen from the query entity.
#[derive(Clone, Copy, Debug)]
pub struct ContextFact {
    pub relation: RelationId,
    pub other: EntityId,
    pub orientation: Orientation,
}

/// Flat-context baseline input: the query followed by linearized 1-hop
/// facts, `"<query> | Context: r1 | o1 | r2 | o2 ..."`. Incoming facts use
/// `"reverse of <s(r)>"`.
pub fn verbalize_flat_context(query: &str, facts: &[ContextFact], m: &MentionTable) -> String {
    let mut s = String::with_capacity(query.len() + 16 * facts.len());
    s.push_str(query);
    s.push_str(" | Context:");
    for (i, f) in facts.iter().enumerate() {
        if i > 0 {
            s.push_str(" |");
        }
        match f.orientation {
            Orientation::Outgoing => {
                s.push(' ');
                s.push_str(m.relation(f.relation).trim());
            }
            Orientation::Incoming => {
                s.push_str(" reverse of ");
                s.push_str(m.relation(f.relation).trim());
            }
        }
        s.push_str(" | ");
        s.push_str(m.entity(f.other).trim());
    }
    s
}

/// Fixed template words, so a tokenizer trained on mentions plus these
/// covers every byte the templates emit.
pub fn template_corpus() -> Vec<String> {
    vec![
        "Predict tail: | ".to_string(),
        "Predict head: | ".to_string(),
        " | Context: reverse of ".to_string(),
    ]
}

/// Corpus for tokenizer training: every mention plus template text.
pub fn mention_corpus(m: &MentionTable) -> Vec<String> {
    let mut corpus: Vec<String> = template_corpus();
    corpus.extend(m.entities().iter().map(|s| format!(" {s}")));
    corpus.extend(m.relations().iter().map(|s| format!(" {s}")));
    corpus.extend(m.entities().iter().cloned());
    corpus
}
