//! Generation-based filtered ranking: MRR and Hits@k.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Featurizer, LinkQuery};
use crate::kg::{Direction, EntityId, KnowledgeGraph, MentionTable, Split};
use crate::model::Gas2s;
use crate::sampler::SubgraphSpec;
use crate::seed::derive;
use crate::tensor::Real;
use crate::verbalize::{SegmentCache, Vocabulary};

pub const HITS_AT: [usize; 3] = [1, 3, 10];

/// A query plus the other known answers removed before ranking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalQuery {
    pub query: LinkQuery,
    pub filter: Vec<EntityId>,
}

impl EvalQuery {
    /// Filter set from every split, minus the gold answer.
    pub fn new(g: &KnowledgeGraph, query: LinkQuery) -> Self {
        let filter = g
            .filter_answers(query.entity, query.relation, query.direction)
            .iter()
            .copied()
            .filter(|&e| e != query.answer)
            .collect();
        EvalQuery { query, filter }
    }
}

/// 1-based filtered rank, or `None` when the gold entity was never generated.
pub type Rank = Option<usize>;

/// Maps generated texts to entities and returns the gold entity's rank
/// among surviving candidates. `candidates` must be sorted best first.
pub fn rank_gold(candidates: &[(String, f64)], q: &EvalQuery, m: &MentionTable) -> Rank {
    let mut seen = HashSet::new();
    let mut rank = 0;
    for (text, _) in candidates {
        let Some(e) = m.entity_by_mention(text) else { continue };
        if !seen.insert(e) || q.filter.contains(&e) {
            continue;
        }
        rank += 1;
        if e == q.query.answer {
            return Some(rank);
        }
    }
    None
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mrr: f64,
    pub hits: BTreeMap<String, f64>,
    pub query_count: usize,
}

impl MetricsReport {
    pub fn hits_at(&self, k: usize) -> f64 {
        self.hits.get(&k.to_string()).copied().unwrap_or(0.0)
    }
}

/// MRR (a miss contributes 0) and Hits@{1,3,10}.
pub fn compute_metrics(ranks: &[Rank]) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::arg("cannot compute metrics over zero queries"));
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / n;
    let hits = HITS_AT
        .iter()
        .map(|&k| {
            let c = ranks.iter().filter(|r| matches!(r, Some(r) if *r <= k)).count();
            (k.to_string(), c as f64 / n)
        })
        .collect();
    Ok(MetricsReport {
        mrr,
        hits,
        query_count: ranks.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub spec: SubgraphSpec,
    pub seed: u64,
    /// generation cap; `None` uses the longest tokenized entity mention
    pub max_new_tokens: Option<usize>,
    /// evaluation threads; 0 uses every core
    pub workers: usize,
    /// hide each query's own triple from its sampled context, as during
    /// training; used to score training queries under training conditions
    pub exclude_own_triple: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_width: 50,
            spec: SubgraphSpec::default(),
            seed: 0,
            max_new_tokens: None,
            workers: 0,
            exclude_own_triple: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub overall: MetricsReport,
    pub per_direction: BTreeMap<String, MetricsReport>,
    pub ranks: Vec<Rank>,
}

/// Top candidates for one query, best first.
pub fn predict<T: Real>(
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    model: &Gas2s<T>,
    q: &LinkQuery,
    cfg: &EvalConfig,
    sample_seed: u64,
    max_new: usize,
    cache: &mut SegmentCache,
) -> Result<Vec<(String, f64)>> {
    let f = Featurizer {
        graph: g,
        vocab,
        mode: model.config().mode,
        spec: &cfg.spec,
        max_len: model.config().max_len,
    };
    let own = q.triple();
    let exclude = cfg.exclude_own_triple.then_some(&own);
    let input = f.input(q, exclude, sample_seed, cache)?;
    let mem = model.encode_memory(&input)?;
    let hyps = model.generate(&mem, cfg.beam_width, max_new)?;
    Ok(hyps.into_iter().map(|h| (vocab.decode(&h.ids), h.log_prob)).collect())
}

/// Longest entity mention in tokens, EOS included.
pub fn longest_mention(g: &KnowledgeGraph, vocab: &Vocabulary, max_len: usize) -> usize {
    let mut cache = SegmentCache::default();
    g.mentions()
        .entities()
        .iter()
        .map(|s| vocab.encode_cached(s, max_len, &mut cache).len())
        .max()
        .unwrap_or(1)
}

/// Ranks every query; workers share the frozen model.
pub fn evaluate_queries<T: Real + Send + Sync>(
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    model: &Gas2s<T>,
    queries: &[LinkQuery],
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    cfg.spec.validate()?;
    if cfg.beam_width == 0 {
        return Err(Error::arg("beam width must be at least 1"));
    }
    if model.config().num_relations != g.num_relations().max(1) || model.config().vocab_size != vocab.size() {
        return Err(Error::Config(
            "checkpoint config does not match the dataset or tokenizer".into(),
        ));
    }
    let max_new = cfg
        .max_new_tokens
        .unwrap_or_else(|| longest_mention(g, vocab, model.config().max_len));
    let work = || -> Result<Vec<Rank>> {
        queries
            .par_iter()
            .enumerate()
            .map_init(SegmentCache::default, |cache, (i, q)| {
                let seed = derive(cfg.seed, "eval-sample", &[i as u64]);
                let cands = predict(g, vocab, model, q, cfg, seed, max_new, cache)?;
                Ok(rank_gold(&cands, &EvalQuery::new(g, *q), g.mentions()))
            })
            .collect()
    };
    let ranks = if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::arg(format!("cannot start worker pool: {e}")))?
            .install(work)?
    } else {
        work()?
    };
    let overall = compute_metrics(&ranks)?;
    let mut per_direction = BTreeMap::new();
    for dir in [Direction::Tail, Direction::Head] {
        let sub: Vec<Rank> = queries
            .iter()
            .zip(&ranks)
            .filter(|(q, _)| q.direction == dir)
            .map(|(_, r)| *r)
            .collect();
        if !sub.is_empty() {
            per_direction.insert(dir.as_str().to_string(), compute_metrics(&sub)?);
        }
    }
    Ok(EvalOutcome {
        overall,
        per_direction,
        ranks,
    })
}

/// Tail and head queries for every triple of `split`.
pub fn evaluate_split<T: Real + Send + Sync>(
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    model: &Gas2s<T>,
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    let queries: Vec<LinkQuery> = g.triples(split).iter().flat_map(LinkQuery::pair).collect();
    if queries.is_empty() {
        return Err(Error::arg(format!("the {split:?} split has no triples")));
    }
    evaluate_queries(g, vocab, model, &queries, cfg)
}

/// JSON record written by the `evaluate` subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: String,
    pub mrr: f64,
    pub hits: BTreeMap<String, f64>,
    pub per_direction: BTreeMap<String, MetricsReport>,
    pub query_count: usize,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(split: &str, mode: &str, outcome: &EvalOutcome, config: &serde_json::Value) -> Self {
        EvalReport {
            split: split.to_string(),
            mode: mode.to_string(),
            mrr: outcome.overall.mrr,
            hits: outcome.overall.hits.clone(),
            per_direction: outcome.per_direction.clone(),
            query_count: outcome.overall.query_count,
            config_digest: config_digest(config),
        }
    }
}

/// Hex SHA-256 of the compact JSON form.
pub fn config_digest(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).unwrap_or_default();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
