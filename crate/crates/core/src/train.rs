//! End-to-end training: batching, Adam, checkpoints, resume and the
//! dropout × heads grid search.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_queries, EvalConfig, MetricsReport};
use crate::features::{Featurizer, LinkQuery};
use crate::kg::{KnowledgeGraph, Split, Triple};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Gas2s, ModelConfig, QueryInput};
use crate::sampler::SubgraphSpec;
use crate::seed::derive;
use crate::tensor::ParamStore;
use crate::verbalize::{SegmentCache, TokenizedSeq, Vocabulary};

/// One training example: a query, its gold mention and the triple the
/// sampler must hide.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingQuery {
    pub query: LinkQuery,
    pub gold_mention: String,
    pub exclude: Triple,
}

/// Tail and head query for every train triple.
pub fn make_training_queries(g: &KnowledgeGraph) -> Vec<TrainingQuery> {
    g.triples(Split::Train)
        .iter()
        .flat_map(|t| {
            LinkQuery::pair(t).map(|q| TrainingQuery {
                query: q,
                gold_mention: g.mentions().entity(q.answer).to_string(),
                exclude: *t,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub rgat_dropout: Vec<f64>,
    pub rgat_heads: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            rgat_dropout: vec![0.0, 0.1, 0.2, 0.5],
            rgat_heads: vec![1, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    /// steps between dev evaluations during [`grid_search`]; 0 disables
    pub eval_interval: u64,
    /// steps between checkpoints; 0 keeps only the final one
    pub checkpoint_interval: u64,
    pub spec: SubgraphSpec,
    /// draw a fresh neighborhood every epoch instead of fixing one per query
    pub resample_each_epoch: bool,
    pub grid: GridConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 2000,
            max_steps: 10_000,
            seed: 0,
            eval_interval: 0,
            checkpoint_interval: 1000,
            spec: SubgraphSpec::default(),
            resample_each_epoch: true,
            grid: GridConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        self.spec.validate()
    }

    /// Warmup then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam first and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update; `t` counts from 1.
    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &[Option<Vec<f32>>],
        lr: f64,
        cfg: &TrainConfig,
        t: u64,
    ) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut params.get_mut(i).data;
            let m = &mut self.m.get_mut(i).data;
            let v = &mut self.v.get_mut(i).data;
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub seed: u64,
}

pub struct Trainer<'a> {
    graph: &'a KnowledgeGraph,
    vocab: &'a Vocabulary,
    cfg: TrainConfig,
    model: Gas2s<f32>,
    adam: AdamState,
    step: u64,
    queries: Vec<TrainingQuery>,
    targets: Vec<TokenizedSeq>,
    losses: Vec<(u64, f64)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        graph: &'a KnowledgeGraph,
        vocab: &'a Vocabulary,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let model = Gas2s::new(model_cfg, derive(cfg.seed, "init", &[]))?;
        Self::with_model(graph, vocab, model, cfg)
    }

    pub fn with_model(
        graph: &'a KnowledgeGraph,
        vocab: &'a Vocabulary,
        model: Gas2s<f32>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_compat(graph, vocab, model.config())?;
        let queries = make_training_queries(graph);
        let mut cache = SegmentCache::default();
        let max_len = model.config().max_len;
        let targets = queries
            .iter()
            .map(|q| vocab.encode_cached(&q.gold_mention, max_len, &mut cache))
            .collect();
        let adam = AdamState::new(model.params());
        Ok(Trainer {
            graph,
            vocab,
            cfg,
            model,
            adam,
            step: 0,
            queries,
            targets,
            losses: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        graph: &'a KnowledgeGraph,
        vocab: &'a Vocabulary,
        ck: Checkpoint<f32>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let meta: TrainMeta = match ck.train_state {
            Some(v) => serde_json::from_value(v).map_err(|e| Error::json("checkpoint train_state", e))?,
            None => return Err(Error::Checkpoint("checkpoint carries no training state".into())),
        };
        if meta.seed != cfg.seed {
            return Err(Error::Config(format!(
                "checkpoint was trained with seed {}, config says {}",
                meta.seed, cfg.seed
            )));
        }
        let model = Gas2s::from_params(ck.config, ck.params)?;
        let mut t = Self::with_model(graph, vocab, model, cfg)?;
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, p) in t.model.params().iter() {
            let get = |prefix: &str| {
                ck.aux
                    .by_name(&format!("{prefix}{name}"))
                    .filter(|a| a.shape == p.shape)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moment for {name}")))
            };
            m.insert(name, get("adam.m.")?)?;
            v.insert(name, get("adam.v.")?)?;
        }
        t.adam = AdamState { m, v };
        t.step = meta.step;
        Ok(t)
    }

    pub fn model(&self) -> &Gas2s<f32> {
        &self.model
    }

    pub fn into_model(self) -> Gas2s<f32> {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn losses(&self) -> &[(u64, f64)] {
        &self.losses
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    fn batches_per_epoch(&self) -> u64 {
        self.queries.len().div_ceil(self.cfg.batch_size) as u64
    }

    /// Query indices of the batch at `step`: a per-epoch shuffle cut into
    /// consecutive batches, so the batch is a function of the step alone.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let nb = self.batches_per_epoch();
        let epoch = step / nb;
        let b = (step % nb) as usize;
        let mut order: Vec<usize> = (0..self.queries.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.cfg.seed, "shuffle", &[epoch]));
        order.shuffle(&mut rng);
        let start = b * self.cfg.batch_size;
        order[start..(start + self.cfg.batch_size).min(order.len())].to_vec()
    }

    fn prepare(&self, step: u64, idx: &[usize]) -> Result<Vec<QueryInput>> {
        let epoch = if self.cfg.resample_each_epoch {
            step / self.batches_per_epoch()
        } else {
            0
        };
        let f = Featurizer {
            graph: self.graph,
            vocab: self.vocab,
            mode: self.model.config().mode,
            spec: &self.cfg.spec,
            max_len: self.model.config().max_len,
        };
        let seed = self.cfg.seed;
        idx.par_iter()
            .map_init(SegmentCache::default, |cache, &i| {
                let q = &self.queries[i];
                let s = derive(seed, "sample", &[epoch, i as u64]);
                f.input(&q.query, Some(&q.exclude), s, cache)
            })
            .collect()
    }

    /// Runs one optimizer step and returns its loss.
    pub fn train_step(&mut self) -> Result<f64> {
        if self.queries.is_empty() {
            return Err(Error::arg("the train split is empty"));
        }
        let step = self.step;
        let idx = self.batch_indices(step);
        let inputs = self.prepare(step, &idx)?;
        let batch: Vec<&QueryInput> = inputs.iter().collect();
        let targets: Vec<&TokenizedSeq> = idx.iter().map(|&i| &self.targets[i]).collect();
        let (loss, grads) = {
            let mut tape = self.model.tape(true, derive(self.cfg.seed, "dropout", &[step]));
            let loss = self.model.loss(&mut tape, &batch, &targets)?;
            let value = tape.scalar(loss)? as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: step + 1,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            let n = self.model.params().len();
            let g: Vec<Option<Vec<f32>>> = (0..n).map(|i| grads.param(i).map(|s| s.to_vec())).collect();
            (value, g)
        };
        let lr = self.cfg.lr_at(step);
        self.adam
            .update(self.model.params_mut(), &grads, lr, &self.cfg, step + 1);
        self.step += 1;
        self.losses.push((self.step, loss));
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut ck = Checkpoint::new(self.model.config().clone(), self.model.params().clone());
        for (name, t) in self.adam.m.iter() {
            ck.aux.insert(format!("adam.m.{name}"), t.clone())?;
        }
        for (name, t) in self.adam.v.iter() {
            ck.aux.insert(format!("adam.v.{name}"), t.clone())?;
        }
        let meta = TrainMeta {
            step: self.step,
            seed: self.cfg.seed,
        };
        ck.train_state = Some(serde_json::to_value(meta).map_err(|e| Error::json("train state", e))?);
        Ok(ck)
    }

    /// Trains until `max_steps`, writing `loss.csv` and checkpoints under
    /// `run_dir` when given.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<()> {
        let mut csv = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("loss.csv");
                let fresh = self.step == 0 || !path.exists();
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "step,loss").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        while self.step < self.cfg.max_steps {
            let loss = self.train_step()?;
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{},{}", self.step, loss).map_err(|e| Error::io(&*path, e))?;
            }
            if self.step % 100 == 0 || self.step == 1 {
                log::info!("step {} loss {:.4}", self.step, loss);
            }
            if let Some(dir) = run_dir {
                let every = self.cfg.checkpoint_interval;
                if every > 0 && self.step % every == 0 {
                    self.save_checkpoint(dir)?;
                }
            }
        }
        if let Some(dir) = run_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, run_dir: &Path) -> Result<PathBuf> {
        let dir = run_dir.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("step-{}.ckpt", self.step));
        self.checkpoint()?.save(&path)?;
        Ok(path)
    }
}

fn check_compat(g: &KnowledgeGraph, vocab: &Vocabulary, cfg: &ModelConfig) -> Result<()> {
    if cfg.num_relations != g.num_relations().max(1) {
        return Err(Error::Config(format!(
            "model expects {} relations, graph has {}",
            cfg.num_relations,
            g.num_relations()
        )));
    }
    if cfg.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from tokenizer size {}",
            cfg.vocab_size,
            vocab.size()
        )));
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: Gas2s<f32>,
    pub losses: Vec<(u64, f64)>,
    pub step: u64,
}

/// Trains a fresh model to `cfg.max_steps`.
pub fn train(
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(g, vocab, model_cfg, cfg)?;
    t.run(run_dir)?;
    let losses = t.losses.clone();
    let step = t.step;
    Ok(TrainOutcome {
        model: t.into_model(),
        losses,
        step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub rgat_dropout: f64,
    pub rgat_heads: usize,
    pub dev_mrr: f64,
    pub report: MetricsReport,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

/// Index of the highest dev MRR; ties go to lower dropout, then fewer heads.
pub fn select_best(cells: &[GridCell]) -> Option<usize> {
    (0..cells.len()).reduce(|best, i| {
        let (a, b) = (&cells[i], &cells[best]);
        let better = a.dev_mrr > b.dev_mrr
            || (a.dev_mrr == b.dev_mrr
                && (a.rgat_dropout < b.rgat_dropout
                    || (a.rgat_dropout == b.rgat_dropout && a.rgat_heads < b.rgat_heads)));
        if better {
            i
        } else {
            best
        }
    })
}

/// Trains one model per (dropout, heads) cell with identical seeds and
/// budgets and scores each on the valid split.
pub fn grid_search(
    g: &KnowledgeGraph,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    run_dir: Option<&Path>,
) -> Result<GridResult> {
    if cfg.grid.rgat_dropout.is_empty() || cfg.grid.rgat_heads.is_empty() {
        return Err(Error::Config("grid axes must be non-empty".into()));
    }
    let dev: Vec<LinkQuery> = g.triples(Split::Valid).iter().flat_map(LinkQuery::pair).collect();
    if dev.is_empty() {
        return Err(Error::arg("grid search needs a non-empty valid split"));
    }
    let mut cells = Vec::new();
    for &p in &cfg.grid.rgat_dropout {
        for &h in &cfg.grid.rgat_heads {
            let mut mc = model_cfg.clone();
            mc.rgat_dropout = p;
            mc.rgat_heads = h;
            let dir = run_dir.map(|d| d.join(format!("dropout-{p}-heads-{h}")));
            log::info!("grid cell dropout={p} heads={h}");
            let out = train(g, vocab, mc, cfg.clone(), dir.as_deref())?;
            let report = evaluate_queries(g, vocab, &out.model, &dev, eval_cfg)?.overall;
            cells.push(GridCell {
                rgat_dropout: p,
                rgat_heads: h,
                dev_mrr: report.mrr,
                report,
                checkpoint: dir.map(|d| d.join("checkpoints").join(format!("step-{}.ckpt", out.step))),
            });
        }
    }
    let best = select_best(&cells).expect("non-empty grid");
    let result = GridResult { cells, best };
    if let Some(dir) = run_dir {
        let path = dir.join("grid.json");
        let json = serde_json::to_string_pretty(&result).map_err(|e| Error::json("grid.json", e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}
