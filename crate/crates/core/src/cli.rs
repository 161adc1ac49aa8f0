//! Command-line front end: argument parsing, config merging and dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, predict, EvalConfig, EvalQuery, EvalReport};
use crate::features::LinkQuery;
use crate::kg::{load_dataset, Direction, EntityId, KnowledgeGraph, RelationId, Split};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Gas2s, Mode};
use crate::sampler::{sample_khop, SubgraphSpec, DEFAULT_MAX_EDGES};
use crate::seed::derive;
use crate::train::{grid_search, Trainer};
use crate::verbalize::{mention_corpus, train_tokenizer, SegmentCache, Vocabulary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "gas2s", version, about = "Graph-augmented seq2seq link prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// dataset directory (train/valid/test.txt, entities.json, relations.json)
    #[arg(long)]
    data: Option<PathBuf>,
    /// run or output directory
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct ModelFlags {
    #[arg(long)]
    mode: Option<Mode>,
    /// tokenizer vocabulary file
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// per-hop fanout caps, e.g. `75` or `10,5`
    #[arg(long, value_delimiter = ',')]
    fanout: Option<Vec<usize>>,
    #[arg(long)]
    max_edges: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// evaluation worker threads
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and index a dataset, report its size and write a normalized copy
    Ingest {
        #[command(flatten)]
        common: Common,
    },
    /// Print graph statistics as JSON
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Train the subword tokenizer on the dataset's mentions
    TokenizerTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vocab_size: Option<usize>,
        /// vocabulary file to write (default `<output>/vocab.json`)
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Train a model
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        warmup_steps: Option<u64>,
        #[arg(long)]
        checkpoint_interval: Option<u64>,
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        /// run the dropout × heads grid instead of a single model
        #[arg(long)]
        grid: bool,
    },
    /// Evaluate a checkpoint on a split and print the metrics report
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Generate candidate answers for one query
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        /// raw id or mention of the known entity
        #[arg(long)]
        entity: String,
        /// raw id or mention of the relation
        #[arg(long)]
        relation: String,
        #[arg(long, default_value = "tail")]
        direction: Direction,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// drop answers already known in any split
        #[arg(long)]
        filtered: bool,
    },
    /// Sample one neighborhood and print it as JSON
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        fanout: Option<Vec<usize>>,
        #[arg(long, default_value_t = DEFAULT_MAX_EDGES)]
        max_edges: usize,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &common.output {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    if let Some(m) = f.mode {
        cfg.mode = Some(m);
    }
    if let Some(t) = &f.tokenizer {
        cfg.tokenizer = Some(t.clone());
    }
    if let Some(fanout) = &f.fanout {
        cfg.train.spec.fanout = fanout.clone();
        cfg.eval.spec.fanout = fanout.clone();
    }
    if let Some(m) = f.max_edges {
        cfg.train.spec.max_edges = m;
        cfg.eval.spec.max_edges = m;
    }
    if let Some(b) = f.beam_width {
        cfg.eval.beam_width = b;
    }
    if let Some(w) = f.workers {
        cfg.eval.workers = w;
    }
    Ok(())
}

/// Finalizes, validates and records the effective config.
fn settle(cfg: &mut RunConfig) -> Result<()> {
    cfg.finalize();
    cfg.validate()?;
    if let Some(dir) = &cfg.output {
        cfg.write_to(dir)?;
    }
    Ok(())
}

fn need_data(cfg: &RunConfig) -> std::result::Result<&Path, Failure> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Failure::Usage("a dataset directory is required (--data or \"data\" in the config)".into()))
}

fn print_json(out: &mut dyn Write, v: &impl serde::Serialize) -> Result<()> {
    let s = serde_json::to_string(v).map_err(|e| Error::json("output", e))?;
    writeln!(out, "{s}").map_err(|e| Error::io("<stdout>", e))
}

fn load_vocab(cfg: &RunConfig, checkpoint: Option<&Path>) -> std::result::Result<Vocabulary, Failure> {
    if let Some(p) = &cfg.tokenizer {
        return Ok(Vocabulary::load(p)?);
    }
    // a checkpoint under <run>/checkpoints/ sits next to <run>/vocab.json
    if let Some(run) = checkpoint.and_then(|c| c.parent()).and_then(|d| d.parent()) {
        let p = run.join("vocab.json");
        if p.exists() {
            return Ok(Vocabulary::load(p)?);
        }
    }
    Err(Failure::Usage("a tokenizer file is required (--tokenizer)".into()))
}

fn load_model(path: &Path, g: &KnowledgeGraph, vocab: &Vocabulary) -> Result<Gas2s<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    if ck.config.num_relations != g.num_relations().max(1) || ck.config.vocab_size != vocab.size() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} relations and {} tokens; dataset has {} relations, tokenizer {} tokens",
            ck.config.num_relations,
            ck.config.vocab_size,
            g.num_relations(),
            vocab.size()
        )));
    }
    Gas2s::from_params(ck.config, ck.params)
}

fn resolve_entity(g: &KnowledgeGraph, s: &str) -> std::result::Result<EntityId, Failure> {
    if let Some(e) = g.entity_by_raw(s).or_else(|| g.mentions().entity_by_mention(s)) {
        return Ok(e);
    }
    let mut near: Vec<(usize, &str)> = g
        .mentions()
        .entities()
        .iter()
        .map(|m| (strsim::levenshtein(s, m), m.as_str()))
        .collect();
    near.sort();
    let list: Vec<&str> = near.iter().take(5).map(|(_, m)| *m).collect();
    Err(Failure::Runtime(Error::arg(format!(
        "unknown entity {s:?}; nearest mentions: {}",
        list.join(", ")
    ))))
}

fn resolve_relation(g: &KnowledgeGraph, s: &str) -> std::result::Result<RelationId, Failure> {
    g.relation_by_raw(s)
        .or_else(|| g.mentions().relation_by_mention(s))
        .ok_or_else(|| Failure::Runtime(Error::arg(format!("unknown relation {s:?}"))))
}

fn run(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Ingest { common } => {
            let mut cfg = base_config(&common)?;
            settle(&mut cfg)?;
            let g = load_dataset(need_data(&cfg)?)?;
            if let Some(dir) = &cfg.output {
                g.write_dataset(dir.join("dataset"))?;
            }
            print_json(
                out,
                &json!({
                    "entities": g.num_entities(),
                    "relations": g.num_relations(),
                    "train": g.triples(Split::Train).len(),
                    "valid": g.triples(Split::Valid).len(),
                    "test": g.triples(Split::Test).len(),
                }),
            )?;
        }
        Command::Stats { common } => {
            let mut cfg = base_config(&common)?;
            settle(&mut cfg)?;
            let g = load_dataset(need_data(&cfg)?)?;
            print_json(out, &g.graph_stats()?)?;
        }
        Command::TokenizerTrain {
            common,
            vocab_size,
            out_file,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(v) = vocab_size {
                cfg.model.vocab_size = v;
            }
            settle(&mut cfg)?;
            let g = load_dataset(need_data(&cfg)?)?;
            let path = match (out_file, &cfg.output) {
                (Some(p), _) => p,
                (None, Some(dir)) => dir.join("vocab.json"),
                (None, None) => return Err(Failure::Usage("--out-file or --output is required".into())),
            };
            let corpus = mention_corpus(g.mentions());
            let vocab = train_tokenizer(corpus.iter().map(String::as_str), cfg.model.vocab_size)?;
            vocab.save(&path)?;
            print_json(out, &json!({"vocab_size": vocab.size(), "path": path}))?;
        }
        Command::Train {
            common,
            model,
            max_steps,
            batch_size,
            learning_rate,
            warmup_steps,
            checkpoint_interval,
            resume,
            grid,
        } => {
            let mut cfg = base_config(&common)?;
            apply_model_flags(&mut cfg, &model)?;
            if let Some(v) = max_steps {
                cfg.train.max_steps = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = warmup_steps {
                cfg.train.warmup_steps = v;
            }
            if let Some(v) = checkpoint_interval {
                cfg.train.checkpoint_interval = v;
            }
            let output = cfg
                .output
                .clone()
                .ok_or_else(|| Failure::Usage("train needs a run directory (--output)".into()))?;
            let g = load_dataset(need_data(&cfg)?)?;
            let vocab = match &cfg.tokenizer {
                Some(p) => Vocabulary::load(p)?,
                None => {
                    let corpus = mention_corpus(g.mentions());
                    train_tokenizer(corpus.iter().map(String::as_str), cfg.model.vocab_size)?
                }
            };
            cfg.model.vocab_size = vocab.size();
            cfg.model.num_relations = g.num_relations().max(1);
            settle(&mut cfg)?;
            vocab.save(output.join("vocab.json"))?;
            if grid {
                let res = grid_search(&g, &vocab, &cfg.model, &cfg.train, &cfg.eval, Some(&output))?;
                print_json(out, &res)?;
                return Ok(());
            }
            let mut trainer = match resume {
                Some(p) => Trainer::resume(&g, &vocab, Checkpoint::load(&p)?, cfg.train.clone())?,
                None => Trainer::new(&g, &vocab, cfg.model.clone(), cfg.train.clone())?,
            };
            trainer.run(Some(&output))?;
            let last = trainer.losses().last().map(|&(_, l)| l);
            print_json(
                out,
                &json!({
                    "steps": trainer.step(),
                    "final_loss": last,
                    "checkpoint": output.join("checkpoints").join(format!("step-{}.ckpt", trainer.step())),
                }),
            )?;
        }
        Command::Evaluate {
            common,
            model,
            checkpoint,
            split,
        } => {
            let mut cfg = base_config(&common)?;
            apply_model_flags(&mut cfg, &model)?;
            let g = load_dataset(need_data(&cfg)?)?;
            let vocab = load_vocab(&cfg, Some(&checkpoint))?;
            let net = load_model(&checkpoint, &g, &vocab)?;
            cfg.model = net.config().clone();
            if cfg.mode.is_some_and(|m| m != net.config().mode) {
                return Err(Failure::Usage(format!(
                    "checkpoint was trained in {} mode",
                    net.config().mode
                )));
            }
            cfg.mode = None;
            settle(&mut cfg)?;
            let outcome = evaluate_split(&g, &vocab, &net, split, &cfg.eval)?;
            let cfg_json = serde_json::to_value(&cfg).map_err(|e| Error::json("run config", e))?;
            let split_name = match split {
                Split::Train => "train",
                Split::Valid => "valid",
                Split::Test => "test",
            };
            let report = EvalReport::new(split_name, net.config().mode.as_str(), &outcome, &cfg_json);
            if let Some(dir) = &cfg.output {
                let path = dir.join(format!("metrics-{split_name}.json"));
                let text = serde_json::to_string_pretty(&report).map_err(|e| Error::json("report", e))?;
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            }
            print_json(out, &report)?;
        }
        Command::Predict {
            common,
            model,
            checkpoint,
            entity,
            relation,
            direction,
            top_k,
            filtered,
        } => {
            let mut cfg = base_config(&common)?;
            apply_model_flags(&mut cfg, &model)?;
            let g = load_dataset(need_data(&cfg)?)?;
            let e = resolve_entity(&g, &entity)?;
            let r = resolve_relation(&g, &relation)?;
            if top_k == 0 {
                return Ok(());
            }
            let vocab = load_vocab(&cfg, Some(&checkpoint))?;
            let net = load_model(&checkpoint, &g, &vocab)?;
            cfg.model = net.config().clone();
            cfg.mode = None;
            settle(&mut cfg)?;
            let q = LinkQuery {
                entity: e,
                relation: r,
                direction,
                answer: e,
            };
            let eval = EvalConfig {
                beam_width: cfg.eval.beam_width.max(top_k),
                ..cfg.eval.clone()
            };
            let max_new = crate::eval::longest_mention(&g, &vocab, net.config().max_len);
            let seed = derive(cfg.eval.seed, "predict", &[]);
            let cands = predict(&g, &vocab, &net, &q, &eval, seed, max_new, &mut SegmentCache::default())?;
            let known = EvalQuery::new(&g, q).filter;
            let mut seen = std::collections::HashSet::new();
            let mut rank = 0;
            for (text, lp) in cands {
                let Some(id) = g.mentions().entity_by_mention(&text) else {
                    continue;
                };
                if !seen.insert(id) || (filtered && known.contains(&id)) {
                    continue;
                }
                rank += 1;
                print_json(
                    out,
                    &json!({"rank": rank, "mention": text, "entity": g.entity_raw(id), "log_prob": lp}),
                )?;
                if rank == top_k {
                    break;
                }
            }
        }
        Command::Sample {
            common,
            entity,
            k,
            fanout,
            max_edges,
        } => {
            let mut cfg = base_config(&common)?;
            settle(&mut cfg)?;
            let g = load_dataset(need_data(&cfg)?)?;
            let e = resolve_entity(&g, &entity)?;
            let fanout = match (k, fanout) {
                (Some(0), _) => Vec::new(),
                (Some(k), Some(f)) if f.len() == k => f,
                (Some(k), Some(f)) => {
                    return Err(Failure::Usage(format!(
                        "--k {k} needs {k} fanout values, got {}",
                        f.len()
                    )))
                }
                (Some(k), None) => vec![75; k],
                (None, Some(f)) => f,
                (None, None) => vec![75],
            };
            let spec = SubgraphSpec::new(fanout, max_edges).map_err(|e| Failure::Usage(e.to_string()))?;
            let s = sample_khop(&g, e, &spec, derive(cfg.seed, "sample-cli", &[]), None)?;
            print_json(
                out,
                &json!({
                    "query": g.entity_raw(e),
                    "nodes": s.nodes.iter().map(|&n| g.entity_raw(n)).collect::<Vec<_>>(),
                    "edge_endpoints": s.edge_endpoints,
                    "edge_relations": s.edge_relations.iter().map(|&r| g.relation_raw(r)).collect::<Vec<_>>(),
                }),
            )?;
        }
    }
    Ok(())
}
