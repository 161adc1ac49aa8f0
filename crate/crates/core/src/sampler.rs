//! Capped k-hop neighborhood sampling around a query entity.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::seed;

pub const DEFAULT_MAX_EDGES: usize = 512;

/// Hop count and per-node fanout caps. `fanout[i]` bounds how many incident
/// train edges each frontier node contributes at hop `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphSpec {
    pub fanout: Vec<usize>,
    pub max_edges: usize,
}

impl SubgraphSpec {
    pub fn new(fanout: Vec<usize>, max_edges: usize) -> Result<Self> {
        let spec = SubgraphSpec { fanout, max_edges };
        spec.validate()?;
        Ok(spec)
    }

    /// One hop with at most `cap` edges.
    pub fn one_hop(cap: usize) -> Self {
        SubgraphSpec {
            fanout: vec![cap],
            max_edges: DEFAULT_MAX_EDGES,
        }
    }

    pub fn k(&self) -> usize {
        self.fanout.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fanout.contains(&0) {
            return Err(Error::arg(format!("fanout caps must be positive: {:?}", self.fanout)));
        }
        Ok(())
    }
}

impl Default for SubgraphSpec {
    fn default() -> Self {
        SubgraphSpec::one_hop(75)
    }
}

/// A sampled neighborhood: local nodes (query first), the `n × 2` local
/// endpoint tensor and the length-`n` relation tensor, plus the source
/// triples in the same order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledSubgraph {
    pub nodes: Vec<EntityId>,
    pub query_local: usize,
    pub edge_endpoints: Vec<[usize; 2]>,
    pub edge_relations: Vec<RelationId>,
    pub triples: Vec<Triple>,
}

impl SampledSubgraph {
    pub fn num_edges(&self) -> usize {
        self.edge_endpoints.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// The query-only subgraph.
    pub fn singleton(e: EntityId) -> Self {
        SampledSubgraph {
            nodes: vec![e],
            query_local: 0,
            edge_endpoints: Vec::new(),
            edge_relations: Vec::new(),
            triples: Vec::new(),
        }
    }
}

fn incident(g: &KnowledgeGraph, v: EntityId, exclude: Option<&Triple>) -> Vec<Triple> {
    let mut out: Vec<Triple> = g
        .out_edges(v)
        .iter()
        .map(|&(relation, tail)| Triple {
            head: v,
            relation,
            tail,
        })
        .chain(
            g.in_edges(v)
                .iter()
                .filter(|&&(_, h)| h != v)
                .map(|&(relation, head)| Triple {
                    head,
                    relation,
                    tail: v,
                }),
        )
        .filter(|t| Some(t) != exclude)
        .collect();
    out.dedup();
    out
}

/// Samples `G_{e,k}`: frontier expansion with per-node caps, then every
/// further train edge among the sampled nodes, in `(head, relation, tail)`
/// local order, until `max_edges`. `exclude` is removed in both
/// orientations. Output is a pure function of the arguments.
pub fn sample_khop(
    g: &KnowledgeGraph,
    e: EntityId,
    spec: &SubgraphSpec,
    seed: u64,
    exclude: Option<&Triple>,
) -> Result<SampledSubgraph> {
    if e.index() >= g.num_entities() {
        return Err(Error::arg(format!(
            "entity id {} out of range ({} entities)",
            e.0,
            g.num_entities()
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![e];
    let mut local: HashMap<EntityId, usize> = HashMap::from([(e, 0)]);
    let mut sampled: BTreeSet<Triple> = BTreeSet::new();
    let mut frontier = vec![e];

    for &cap in &spec.fanout {
        let mut next = Vec::new();
        for &v in &frontier {
            let cands = incident(g, v, exclude);
            let picked: Vec<usize> = if cands.len() <= cap {
                (0..cands.len()).collect()
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, cands.len(), cap).into_vec();
                idx.sort_unstable();
                idx
            };
            for i in picked {
                let t = cands[i];
                sampled.insert(t);
                let other = if t.head == v { t.tail } else { t.head };
                if !local.contains_key(&other) {
                    local.insert(other, nodes.len());
                    nodes.push(other);
                    next.push(other);
                }
            }
        }
        frontier = next;
    }

    let key = |t: &Triple| (local[&t.head], t.relation, local[&t.tail]);
    let mut chosen: Vec<Triple> = sampled.iter().copied().collect();
    chosen.sort_by_key(key);
    chosen.truncate(spec.max_edges);
    if chosen.len() < spec.max_edges {
        let mut induced: Vec<Triple> = Vec::new();
        for &v in &nodes {
            for &(relation, tail) in g.out_edges(v) {
                let t = Triple {
                    head: v,
                    relation,
                    tail,
                };
                if local.contains_key(&tail) && Some(&t) != exclude && !sampled.contains(&t) {
                    induced.push(t);
                }
            }
        }
        induced.sort_by_key(key);
        induced.dedup();
        let room = spec.max_edges - chosen.len();
        chosen.extend(induced.into_iter().take(room));
        chosen.sort_by_key(key);
    }

    Ok(SampledSubgraph {
        edge_endpoints: chosen.iter().map(|t| [local[&t.head], local[&t.tail]]).collect(),
        edge_relations: chosen.iter().map(|t| t.relation).collect(),
        triples: chosen,
        nodes,
        query_local: 0,
    })
}

/// Per-query sampling seed: a function of the base seed and the query's
/// global index only.
pub fn query_seed(base_seed: u64, index: u64) -> u64 {
    seed::derive(base_seed, "sample", &[index])
}

/// Samples every `(entity, exclude)` query; element `i` uses the seed of
/// global index `start_index + i`, so any partition of a batch gives the
/// same results.
pub fn batch_sample(
    g: &KnowledgeGraph,
    queries: &[(EntityId, Option<Triple>)],
    spec: &SubgraphSpec,
    base_seed: u64,
    start_index: u64,
) -> Result<Vec<SampledSubgraph>> {
    if queries.is_empty() {
        return Err(Error::arg("batch_sample needs at least one query"));
    }
    queries
        .iter()
        .enumerate()
        .map(|(i, (e, ex))| sample_khop(g, *e, spec, query_seed(base_seed, start_index + i as u64), ex.as_ref()))
        .collect()
}
