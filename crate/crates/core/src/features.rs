//! Link queries and their conversion into model inputs for each mode.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kg::{Direction, EntityId, KnowledgeGraph, Orientation, RelationId, Triple};
use crate::model::{GraphInput, Mode, QueryInput};
use crate::sampler::{sample_khop, SubgraphSpec};
use crate::verbalize::{
    verbalize_flat_context, verbalize_query, verbalize_triple, ContextFact, SegmentCache, TokenizedSeq, Vocabulary,
};

/// `(e, r, ?)` for tail queries, `(?, r, e)` for head queries, with the
/// entity that completes the triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkQuery {
    pub entity: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
    pub answer: EntityId,
}

impl LinkQuery {
    /// Both queries of a triple, tail first.
    pub fn pair(t: &Triple) -> [LinkQuery; 2] {
        [
            LinkQuery {
                entity: t.head,
                relation: t.relation,
                direction: Direction::Tail,
                answer: t.tail,
            },
            LinkQuery {
                entity: t.tail,
                relation: t.relation,
                direction: Direction::Head,
                answer: t.head,
            },
        ]
    }

    pub fn triple(&self) -> Triple {
        match self.direction {
            Direction::Tail => Triple {
                head: self.entity,
                relation: self.relation,
                tail: self.answer,
            },
            Direction::Head => Triple {
                head: self.answer,
                relation: self.relation,
                tail: self.entity,
            },
        }
    }
}

/// Builds [`QueryInput`]s: verbalization, neighborhood sampling and
/// tokenization, as the mode requires.
#[derive(Clone, Copy)]
pub struct Featurizer<'a> {
    pub graph: &'a KnowledgeGraph,
    pub vocab: &'a Vocabulary,
    pub mode: Mode,
    pub spec: &'a SubgraphSpec,
    pub max_len: usize,
}

impl<'a> Featurizer<'a> {
    pub fn query_text(&self, q: &LinkQuery) -> String {
        verbalize_query(q.entity, q.relation, q.direction, self.graph.mentions())
    }

    pub fn target(&self, q: &LinkQuery, cache: &mut SegmentCache) -> TokenizedSeq {
        self.vocab
            .encode_cached(self.graph.mentions().entity(q.answer), self.max_len, cache)
    }

    /// `exclude` removes the query's own triple from the sampled context.
    pub fn input(
        &self,
        q: &LinkQuery,
        exclude: Option<&Triple>,
        seed: u64,
        cache: &mut SegmentCache,
    ) -> Result<QueryInput> {
        let text = self.query_text(q);
        let m = self.graph.mentions();
        match self.mode {
            Mode::Plain => Ok(QueryInput {
                query: self.vocab.encode_cached(&text, self.max_len, cache),
                graph: None,
            }),
            Mode::FlatContext => {
                let cap = self.spec.fanout.first().copied();
                let facts: Vec<ContextFact> = match cap {
                    None => Vec::new(),
                    Some(cap) => {
                        let one = SubgraphSpec {
                            fanout: vec![cap],
                            max_edges: self.spec.max_edges,
                        };
                        let sub = sample_khop(self.graph, q.entity, &one, seed, exclude)?;
                        sub.triples
                            .iter()
                            .filter(|t| t.head == q.entity || t.tail == q.entity)
                            .map(|t| {
                                if t.head == q.entity {
                                    ContextFact {
                                        relation: t.relation,
                                        other: t.tail,
                                        orientation: Orientation::Outgoing,
                                    }
                                } else {
                                    ContextFact {
                                        relation: t.relation,
                                        other: t.head,
                                        orientation: Orientation::Incoming,
                                    }
                                }
                            })
                            .collect()
                    }
                };
                let flat = verbalize_flat_context(&text, &facts, m);
                Ok(QueryInput {
                    query: self.vocab.encode_cached(&flat, self.max_len, cache),
                    graph: None,
                })
            }
            Mode::GaS2s => {
                let sub = sample_khop(self.graph, q.entity, self.spec, seed, exclude)?;
                let triples = sub
                    .triples
                    .iter()
                    .map(|t| self.vocab.encode_cached(&verbalize_triple(t, m), self.max_len, cache))
                    .collect();
                Ok(QueryInput {
                    query: self.vocab.encode_cached(&text, self.max_len, cache),
                    graph: Some(GraphInput { subgraph: sub, triples }),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verbalize::{mention_corpus, train_tokenizer};

    #[test]
    fn flat_context_lists_only_query_facts() {
        let ents = (0..4).map(|i| (format!("e{i}"), format!("ent {i}"))).collect();
        let g = KnowledgeGraph::from_parts(
            ents,
            vec![("r".into(), "likes".into())],
            vec![
                Triple::new(0, 0, 1),
                Triple::new(2, 0, 0),
                Triple::new(1, 0, 2),
                Triple::new(0, 0, 3),
            ],
            vec![],
            vec![],
        )
        .unwrap();
        let corpus = mention_corpus(g.mentions());
        let vocab = train_tokenizer(corpus.iter().map(|s| s.as_str()), 120).unwrap();
        let spec = SubgraphSpec::one_hop(10);
        let f = Featurizer {
            graph: &g,
            vocab: &vocab,
            mode: Mode::FlatContext,
            spec: &spec,
            max_len: 512,
        };
        let q = LinkQuery::pair(&Triple::new(0, 0, 3))[0];
        let mut cache = SegmentCache::default();
        let input = f.input(&q, Some(&q.triple()), 0, &mut cache).unwrap();
        assert_eq!(
            vocab.decode(&input.query.ids),
            "Predict tail: ent 0 | likes | Context: likes | ent 1 | reverse of likes | ent 2"
        );
    }

    #[test]
    fn query_pair_round_trips_triple() {
        let t = Triple::new(3, 1, 5);
        for q in LinkQuery::pair(&t) {
            assert_eq!(q.triple(), t);
        }
    }
}
