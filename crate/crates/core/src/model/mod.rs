//! The encoder / graph-attention / decoder network and its ablation modes.

pub mod checkpoint;
pub mod config;
pub mod generate;
mod init;
pub mod layers;

use std::ops::Range;

pub use config::{Mode, ModelConfig};
pub use generate::{BeamHypothesis, Memory};

use init::Index;
use layers::{attention, causal_mask, feed_forward, key_mask, norm, position_bias};

use crate::error::{Error, Result};
use crate::sampler::SampledSubgraph;
use crate::tensor::{ParamStore, Real, Tape, Var};
use crate::verbalize::{TokenizedSeq, EOS, PAD};

const LEAKY_SLOPE: f64 = 0.2;

/// Encoder states for a padded batch of sequences.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[S, L, d]`
    pub hidden: Var,
    /// unpadded length of each sequence
    pub lens: Vec<usize>,
}

/// Everything the network needs for one query in one mode. In ga-s2s mode
/// `graph` carries the sampled subgraph and one encoded triple per edge;
/// otherwise `query` is the only input (the flattened context text in
/// flat-context mode).
#[derive(Clone, Debug)]
pub struct QueryInput {
    pub query: TokenizedSeq,
    pub graph: Option<GraphInput>,
}

#[derive(Clone, Debug)]
pub struct GraphInput {
    pub subgraph: SampledSubgraph,
    pub triples: Vec<TokenizedSeq>,
}

/// Offsets of the blocks inside one query's decoder memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemoryLayout {
    pub query: Range<usize>,
    pub triples: Vec<Range<usize>>,
    pub nodes: Range<usize>,
    pub len: usize,
}

impl MemoryLayout {
    pub fn ga_s2s(m: usize, n_triples: usize, n_nodes: usize) -> Self {
        let triples = (0..n_triples).map(|i| m * (i + 1)..m * (i + 2)).collect();
        let start = m * (1 + n_triples);
        MemoryLayout {
            query: 0..m,
            triples,
            nodes: start..start + n_nodes,
            len: start + n_nodes,
        }
    }

    /// Plain and flat-context memories are one undistilled sequence block.
    pub fn sequence(len: usize) -> Self {
        MemoryLayout {
            query: 0..len,
            triples: Vec::new(),
            nodes: len..len,
            len,
        }
    }
}

/// Padded cross-attention context for a batch.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    /// `[B, M, d]`
    pub memory: Var,
    pub lens: Vec<usize>,
    pub layouts: Vec<MemoryLayout>,
}

/// The pieces of one query's memory.
pub enum MemoryParts {
    /// distilled query `[m, d]`, distilled triples stacked `[n·m, d]`
    /// (absent when `n = 0`), node features `[|V|, d]`
    Graph {
        query: Var,
        triples: Option<Var>,
        nodes: Var,
    },
    /// undistilled encoder states `[L, d]`
    Sequence(Var),
}

/// Disjoint union of sampled subgraphs with global node and triple numbering.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub num_nodes: usize,
    pub num_triples: usize,
    pub node_offsets: Vec<usize>,
    pub triple_offsets: Vec<usize>,
    endpoints: Vec<[usize; 2]>,
    relations: Vec<usize>,
}

impl GraphBatch {
    pub fn new(subs: &[&SampledSubgraph], num_relations: usize) -> Result<Self> {
        let mut gb = GraphBatch {
            num_nodes: 0,
            num_triples: 0,
            node_offsets: Vec::with_capacity(subs.len() + 1),
            triple_offsets: Vec::with_capacity(subs.len() + 1),
            endpoints: Vec::new(),
            relations: Vec::new(),
        };
        for sub in subs {
            if sub.edge_endpoints.len() != sub.edge_relations.len() {
                return Err(Error::arg("edge endpoint and relation tensors differ in length"));
            }
            gb.node_offsets.push(gb.num_nodes);
            gb.triple_offsets.push(gb.num_triples);
            for (&[h, t], r) in sub.edge_endpoints.iter().zip(&sub.edge_relations) {
                if h >= sub.num_nodes() || t >= sub.num_nodes() {
                    return Err(Error::arg(format!(
                        "edge endpoint ({h}, {t}) outside {} local nodes",
                        sub.num_nodes()
                    )));
                }
                if r.index() >= num_relations {
                    return Err(Error::arg(format!(
                        "relation id {} out of range ({num_relations} relations)",
                        r.0
                    )));
                }
                gb.endpoints.push([gb.num_nodes + h, gb.num_nodes + t]);
                gb.relations.push(r.index());
            }
            gb.num_nodes += sub.num_nodes();
            gb.num_triples += sub.num_edges();
        }
        gb.node_offsets.push(gb.num_nodes);
        gb.triple_offsets.push(gb.num_triples);
        Ok(gb)
    }

    /// Directed message edges `(src, dst, relation)`: each triple forward
    /// with `r`, backward with `r + R`, plus one self-loop per node with `2R`.
    pub fn message_edges(&self, num_relations: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let e = 2 * self.endpoints.len() + self.num_nodes;
        let (mut src, mut dst, mut rel) = (Vec::with_capacity(e), Vec::with_capacity(e), Vec::with_capacity(e));
        for (&[h, t], &r) in self.endpoints.iter().zip(&self.relations) {
            src.push(h);
            dst.push(t);
            rel.push(r);
            src.push(t);
            dst.push(h);
            rel.push(r + num_relations);
        }
        for v in 0..self.num_nodes {
            src.push(v);
            dst.push(v);
            rel.push(2 * num_relations);
        }
        (src, dst, rel)
    }
}

pub struct Gas2s<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    idx: Index,
}

impl<T: Real> Gas2s<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init::init_params(&config, seed)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let idx = init::resolve(&config, &params)?;
        Ok(Gas2s { config, params, idx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn tape(&self, train: bool, seed: u64) -> Tape<'_, T> {
        Tape::new(Some(&self.params), train, seed)
    }

    fn graph_idx(&self) -> Result<&init::GraphIdx> {
        self.idx
            .graph
            .as_ref()
            .ok_or_else(|| Error::arg(format!("graph stages are unavailable in {} mode", self.config.mode)))
    }

    // ---- encoder --------------------------------------------------------

    pub fn encode_batch(&self, tape: &mut Tape<'_, T>, seqs: &[&TokenizedSeq]) -> Result<EncoderOutput> {
        if seqs.is_empty() {
            return Err(Error::arg("encode_batch needs at least one sequence"));
        }
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::arg("cannot encode an empty sequence"));
            }
            if s.len() > self.config.max_len {
                return Err(Error::arg(format!(
                    "sequence of {} tokens exceeds max_len {}",
                    s.len(),
                    self.config.max_len
                )));
            }
            lens.push(s.len());
        }
        let l = *lens.iter().max().expect("non-empty");
        let mut ids = Vec::with_capacity(seqs.len() * l);
        for s in seqs {
            ids.extend(s.ids.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat(PAD as usize).take(l - s.len()));
        }
        self.encode_ids(tape, &ids, lens, l)
    }

    fn encode_ids(&self, tape: &mut Tape<'_, T>, ids: &[usize], lens: Vec<usize>, l: usize) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let s = lens.len();
        let d = cfg.d_model;
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::arg(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = tape.param(self.idx.embed)?;
        let x = tape.embedding(table, ids)?;
        let mut x = tape.reshape(x, &[s, l, d])?;
        let bias = position_bias(
            tape,
            self.idx.enc_bias,
            l,
            l,
            0,
            true,
            cfg.relative_buckets,
            cfg.relative_max_distance,
        )?;
        let mask = key_mask(tape, &lens, l)?;
        let bias = tape.add(bias, mask)?;
        for blk in &self.idx.enc {
            let h = norm(tape, x, blk.ln_self)?;
            let a = attention(tape, h, h, &blk.self_attn, cfg.attn_heads, &[bias])?;
            x = tape.add(x, a)?;
            let h = norm(tape, x, blk.ln_ff)?;
            let f = feed_forward(tape, h, blk.wi, blk.wo)?;
            x = tape.add(x, f)?;
        }
        let hidden = norm(tape, x, self.idx.enc_ln)?;
        Ok(EncoderOutput { hidden, lens })
    }

    // ---- graph stages ---------------------------------------------------

    /// Attention pooling of every sequence into `m` vectors: `[S, m, d]`.
    pub fn distill(&self, tape: &mut Tape<'_, T>, enc: &EncoderOutput) -> Result<Var> {
        let gi = self.graph_idx()?;
        let d = self.config.d_model;
        let l = tape.shape(enc.hidden)[1];
        let q = tape.param(gi.distill_q)?;
        let wk = tape.param(gi.distill_k)?;
        let wv = tape.param(gi.distill_v)?;
        let k = tape.matmul(enc.hidden, wk)?;
        let v = tape.matmul(enc.hidden, wv)?;
        let scores = tape.matmul_nt(k, q)?; // [S, L, m]
        let scores = tape.transpose(scores, 1, 2)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let mask = key_mask(tape, &enc.lens, l)?;
        let mask = tape.reshape(mask, &[enc.lens.len(), 1, l])?;
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores)?;
        tape.matmul(attn, v)
    }

    /// Mean of the `[CLS]` states of the triples touching each node; a node
    /// in no triple gets the learned fallback row. `cls` is `[n_triples, d]`
    /// in batch triple order. Returns `[num_nodes, d]`.
    pub fn aggregate_entity_features(&self, tape: &mut Tape<'_, T>, gb: &GraphBatch, cls: Var) -> Result<Var> {
        let gi = self.graph_idx()?;
        let d = self.config.d_model;
        let rows = tape.shape(cls)[0];
        if rows != gb.num_triples {
            return Err(Error::arg(format!(
                "{rows} triple states for {} subgraph triples",
                gb.num_triples
            )));
        }
        let mut src = Vec::with_capacity(2 * rows);
        let mut dst = Vec::with_capacity(2 * rows);
        let mut count = vec![0usize; gb.num_nodes];
        for (i, &[h, t]) in gb.endpoints.iter().enumerate() {
            src.push(i);
            dst.push(h);
            count[h] += 1;
            if t != h {
                src.push(i);
                dst.push(t);
                count[t] += 1;
            }
        }
        let fallback = tape.param(gi.fallback)?;
        let missing: Vec<T> = count
            .iter()
            .map(|&c| if c == 0 { T::one() } else { T::zero() })
            .collect();
        let missing = tape.constant(missing, &[gb.num_nodes, 1])?;
        let fill = tape.mul(missing, fallback)?;
        if src.is_empty() {
            return Ok(fill);
        }
        let contrib = tape.gather_rows(cls, &src)?;
        let sum = tape.scatter_add_rows(contrib, &dst, gb.num_nodes)?;
        let inv: Vec<T> = count
            .iter()
            .map(|&c| if c == 0 { T::zero() } else { T::one() / T::of(c as f64) })
            .collect();
        let inv = tape.constant(inv, &[gb.num_nodes, 1])?;
        let mean = tape.mul(sum, inv)?;
        let out = tape.add(mean, fill)?;
        debug_assert_eq!(tape.shape(out), &[gb.num_nodes, d]);
        Ok(out)
    }

    /// Graph attention over the batch union. Returns the updated features
    /// and, per layer, the `[E, heads]` attention weights on the message
    /// edges of [`GraphBatch::message_edges`].
    pub fn rgat_forward(&self, tape: &mut Tape<'_, T>, gb: &GraphBatch, x: Var) -> Result<(Var, Vec<Var>)> {
        let gi = self.graph_idx()?;
        let cfg = &self.config;
        let (d, heads) = (cfg.d_model, cfg.rgat_heads);
        let dh = d / heads;
        let (src, dst, rel) = gb.message_edges(cfg.num_relations);
        let e = src.len();
        let mut x = x;
        let mut alphas = Vec::with_capacity(gi.rgat.len());
        for layer in &gi.rgat {
            let w_rel = tape.param(layer.rel_w)?;
            let w_self = tape.param(layer.self_w)?;
            let a_self = tape.param(layer.att_self)?;
            let a_msg = tape.param(layer.att_msg)?;

            let xs = tape.gather_rows(x, &src)?;
            let msg = tape.relation_matmul(xs, w_rel, &rel)?;
            let recv = tape.matmul(x, w_self)?;
            let recv = tape.gather_rows(recv, &dst)?;

            let msg_h = tape.reshape(msg, &[e, heads, dh])?;
            let recv_h = tape.reshape(recv, &[e, heads, dh])?;
            let ls = tape.mul(recv_h, a_self)?;
            let ls = tape.sum_axis(ls, 2)?;
            let lm = tape.mul(msg_h, a_msg)?;
            let lm = tape.sum_axis(lm, 2)?;
            let logits = tape.add(ls, lm)?;
            let logits = tape.leaky_relu(logits, LEAKY_SLOPE)?;
            let alpha = tape.segment_softmax(logits, &dst, gb.num_nodes)?;
            alphas.push(alpha);
            let alpha = tape.dropout(alpha, cfg.rgat_dropout)?;

            let alpha = tape.reshape(alpha, &[e, heads, 1])?;
            let weighted = tape.mul(msg_h, alpha)?;
            let weighted = tape.reshape(weighted, &[e, d])?;
            let agg = tape.scatter_add_rows(weighted, &dst, gb.num_nodes)?;
            x = tape.gelu(agg)?;
        }
        Ok((x, alphas))
    }

    // ---- memory ---------------------------------------------------------

    /// Concatenates one query's memory blocks into `[M, d]`.
    pub fn build_decoder_memory(&self, tape: &mut Tape<'_, T>, parts: MemoryParts) -> Result<(Var, MemoryLayout)> {
        let m = self.config.m;
        match (self.config.mode, parts) {
            (Mode::GaS2s, MemoryParts::Graph { query, triples, nodes }) => {
                if tape.shape(query)[0] != m {
                    return Err(Error::arg(format!(
                        "query block has {} rows, expected m = {m}",
                        tape.shape(query)[0]
                    )));
                }
                let n_nodes = tape.shape(nodes)[0];
                let mut blocks = vec![query];
                let mut n_triples = 0;
                if let Some(t) = triples {
                    let rows = tape.shape(t)[0];
                    if rows % m != 0 {
                        return Err(Error::arg(format!("{rows} triple rows are not a multiple of m = {m}")));
                    }
                    n_triples = rows / m;
                    blocks.push(t);
                }
                blocks.push(nodes);
                let mem = tape.concat(&blocks, 0)?;
                Ok((mem, MemoryLayout::ga_s2s(m, n_triples, n_nodes)))
            }
            (Mode::Plain | Mode::FlatContext, MemoryParts::Sequence(h)) => {
                let len = tape.shape(h)[0];
                Ok((h, MemoryLayout::sequence(len)))
            }
            (mode, _) => Err(Error::arg(format!("memory parts do not match {mode} mode"))),
        }
    }

    fn check_inputs(&self, batch: &[&QueryInput]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::arg("empty query batch"));
        }
        for q in batch {
            match (&q.graph, self.config.mode) {
                (Some(g), Mode::GaS2s) => {
                    if g.triples.len() != g.subgraph.num_edges() {
                        return Err(Error::arg(format!(
                            "{} encoded triples for a subgraph with {} edges",
                            g.triples.len(),
                            g.subgraph.num_edges()
                        )));
                    }
                }
                (None, Mode::Plain | Mode::FlatContext) => {}
                (Some(_), mode) => return Err(Error::arg(format!("{mode} mode takes no subgraph input"))),
                (None, mode) => return Err(Error::arg(format!("{mode} mode requires a subgraph input"))),
            }
        }
        Ok(())
    }

    /// Runs everything up to the decoder for a batch of queries.
    pub fn memory(&self, tape: &mut Tape<'_, T>, batch: &[&QueryInput]) -> Result<DecoderMemory> {
        self.check_inputs(batch)?;
        let d = self.config.d_model;
        let mut mems = Vec::with_capacity(batch.len());
        let mut layouts = Vec::with_capacity(batch.len());
        if self.config.mode == Mode::GaS2s {
            // query sequences first, then every triple sequence in batch order
            let mut seqs: Vec<&TokenizedSeq> = batch.iter().map(|q| &q.query).collect();
            let mut subs = Vec::with_capacity(batch.len());
            for q in batch {
                let g = q.graph.as_ref().expect("checked");
                seqs.extend(g.triples.iter());
                subs.push(&g.subgraph);
            }
            let enc = self.encode_batch(tape, &seqs)?;
            let gb = GraphBatch::new(&subs, self.config.num_relations)?;
            let b = batch.len();
            let l = tape.shape(enc.hidden)[1];
            let flat = tape.reshape(enc.hidden, &[seqs.len() * l, d])?;
            let cls_rows: Vec<usize> = (b..seqs.len()).map(|s| s * l).collect();
            let cls = if cls_rows.is_empty() {
                tape.constant(Vec::new(), &[0, d])?
            } else {
                tape.gather_rows(flat, &cls_rows)?
            };
            let x = self.aggregate_entity_features(tape, &gb, cls)?;
            let (nodes, _) = self.rgat_forward(tape, &gb, x)?;
            let distilled = self.distill(tape, &enc)?;
            let m = self.config.m;
            for (i, q) in batch.iter().enumerate() {
                let query = tape.slice(distilled, 0, i, i + 1)?;
                let query = tape.reshape(query, &[m, d])?;
                let n = q.graph.as_ref().expect("checked").triples.len();
                let triples = if n == 0 {
                    None
                } else {
                    let t0 = b + gb.triple_offsets[i];
                    let t = tape.slice(distilled, 0, t0, t0 + n)?;
                    Some(tape.reshape(t, &[n * m, d])?)
                };
                let node_rows = tape.slice(nodes, 0, gb.node_offsets[i], gb.node_offsets[i + 1])?;
                let (mem, layout) = self.build_decoder_memory(
                    tape,
                    MemoryParts::Graph {
                        query,
                        triples,
                        nodes: node_rows,
                    },
                )?;
                mems.push(mem);
                layouts.push(layout);
            }
        } else {
            let seqs: Vec<&TokenizedSeq> = batch.iter().map(|q| &q.query).collect();
            let enc = self.encode_batch(tape, &seqs)?;
            for (i, &len) in enc.lens.iter().enumerate() {
                let h = tape.slice(enc.hidden, 0, i, i + 1)?;
                let h = tape.slice(h, 1, 0, len)?;
                let h = tape.reshape(h, &[len, d])?;
                let (mem, layout) = self.build_decoder_memory(tape, MemoryParts::Sequence(h))?;
                mems.push(mem);
                layouts.push(layout);
            }
        }
        self.stack_memories(tape, &mems, layouts)
    }

    /// Pads `[M_i, d]` memories with zero rows and stacks them to `[B, M, d]`.
    pub fn stack_memories(
        &self,
        tape: &mut Tape<'_, T>,
        mems: &[Var],
        layouts: Vec<MemoryLayout>,
    ) -> Result<DecoderMemory> {
        let d = self.config.d_model;
        let lens: Vec<usize> = mems.iter().map(|&v| tape.shape(v)[0]).collect();
        let max = *lens.iter().max().ok_or_else(|| Error::arg("no memories to stack"))?;
        let mut rows = Vec::with_capacity(mems.len());
        for (&mem, &len) in mems.iter().zip(&lens) {
            let full = if len < max {
                let pad = tape.constant(vec![T::zero(); (max - len) * d], &[max - len, d])?;
                tape.concat(&[mem, pad], 0)?
            } else {
                mem
            };
            rows.push(tape.reshape(full, &[1, max, d])?);
        }
        let memory = if rows.len() == 1 {
            rows[0]
        } else {
            tape.concat(&rows, 0)?
        };
        Ok(DecoderMemory { memory, lens, layouts })
    }

    // ---- decoder --------------------------------------------------------

    /// Decoder states `[B, T, d]` for right-padded input ids `[B, T]`.
    pub fn decoder_hidden(
        &self,
        tape: &mut Tape<'_, T>,
        mem: &DecoderMemory,
        inputs: &[usize],
        t: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = mem.lens.len();
        if inputs.len() != b * t || t == 0 {
            return Err(Error::arg(format!(
                "decoder input of {} ids does not match batch {b} × length {t}",
                inputs.len()
            )));
        }
        if tape.shape(mem.memory)[0] != b {
            return Err(Error::arg("decoder memory batch does not match its lengths"));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::arg(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let mlen = tape.shape(mem.memory)[1];
        let table = tape.param(self.idx.embed)?;
        let x = tape.embedding(table, inputs)?;
        let mut x = tape.reshape(x, &[b, t, d])?;
        let bias = position_bias(
            tape,
            self.idx.dec_bias,
            t,
            t,
            0,
            false,
            cfg.relative_buckets,
            cfg.relative_max_distance,
        )?;
        let causal = causal_mask(tape, t, t, 0)?;
        let self_bias = tape.add(bias, causal)?;
        let cross_mask = key_mask(tape, &mem.lens, mlen)?;
        for blk in &self.idx.dec {
            let h = norm(tape, x, blk.ln_self)?;
            let a = attention(tape, h, h, &blk.self_attn, cfg.attn_heads, &[self_bias])?;
            x = tape.add(x, a)?;
            let (ln_cross, cross) = blk.cross.as_ref().expect("decoder blocks carry cross-attention");
            let h = norm(tape, x, *ln_cross)?;
            let a = attention(tape, h, mem.memory, cross, cfg.attn_heads, &[cross_mask])?;
            x = tape.add(x, a)?;
            let h = norm(tape, x, blk.ln_ff)?;
            let f = feed_forward(tape, h, blk.wi, blk.wo)?;
            x = tape.add(x, f)?;
        }
        norm(tape, x, self.idx.dec_ln)
    }

    /// Output logits through the tied embedding.
    pub fn project(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Var> {
        let h = tape.scale(h, (self.config.d_model as f64).powf(-0.5))?;
        let table = tape.param(self.idx.embed)?;
        tape.matmul_nt(h, table)
    }

    /// Teacher-forced loss: per-query mean token cross-entropy over non-PAD
    /// targets, averaged over the batch.
    pub fn decode_loss(&self, tape: &mut Tape<'_, T>, mem: &DecoderMemory, targets: &[&TokenizedSeq]) -> Result<Var> {
        let b = mem.lens.len();
        if targets.len() != b {
            return Err(Error::arg(format!("{} targets for {b} memories", targets.len())));
        }
        for tgt in targets {
            if tgt.is_empty() {
                return Err(Error::arg("empty target sequence"));
            }
            if tgt.ids.last() != Some(&EOS) {
                return Err(Error::arg("target sequence must end with EOS"));
            }
        }
        let t = targets.iter().map(|s| s.len()).max().expect("non-empty");
        let mut inputs = Vec::with_capacity(b * t);
        let mut gold = Vec::with_capacity(b * t);
        for tgt in targets {
            inputs.push(PAD as usize);
            inputs.extend(tgt.ids[..tgt.len() - 1].iter().map(|&i| i as usize));
            gold.extend(tgt.ids.iter().map(|&i| i as usize));
            for _ in tgt.len()..t {
                inputs.push(PAD as usize);
                gold.push(PAD as usize);
            }
        }
        let h = self.decoder_hidden(tape, mem, &inputs, t)?;
        let logits = self.project(tape, h)?;
        let v = self.config.vocab_size;
        let mut per_query = Vec::with_capacity(b);
        for i in 0..b {
            let li = tape.slice(logits, 0, i, i + 1)?;
            let li = tape.reshape(li, &[t, v])?;
            per_query.push(tape.cross_entropy(li, &gold[i * t..(i + 1) * t], PAD as usize)?);
        }
        let total = if per_query.len() == 1 {
            per_query[0]
        } else {
            let stacked = tape.concat(&per_query, 0)?;
            tape.sum_all(stacked)?
        };
        tape.scale(total, 1.0 / b as f64)
    }

    /// Full forward to the batch loss.
    pub fn loss(&self, tape: &mut Tape<'_, T>, batch: &[&QueryInput], targets: &[&TokenizedSeq]) -> Result<Var> {
        let mem = self.memory(tape, batch)?;
        self.decode_loss(tape, &mem, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityId, RelationId};

    fn cfg(mode: Mode) -> ModelConfig {
        let mut c = ModelConfig::tiny(40, 2);
        c.d_model = 16;
        c.attn_heads = 2;
        c.d_ff = 32;
        c.mode = mode;
        c
    }

    fn seq(ids: &[u32]) -> TokenizedSeq {
        TokenizedSeq { ids: ids.to_vec() }
    }

    fn graph_input() -> QueryInput {
        QueryInput {
            query: seq(&[7, 8, 9, EOS]),
            graph: Some(GraphInput {
                subgraph: SampledSubgraph {
                    nodes: vec![EntityId(0), EntityId(1), EntityId(2)],
                    query_local: 0,
                    edge_endpoints: vec![[0, 1], [2, 0]],
                    edge_relations: vec![RelationId(0), RelationId(1)],
                    triples: vec![],
                },
                triples: vec![seq(&[3, 10, 4, 11, EOS]), seq(&[3, 12, 4, 13, 4, 10, EOS])],
            }),
        }
    }

    #[test]
    fn layout_arithmetic() {
        let l = MemoryLayout::ga_s2s(3, 0, 1);
        assert_eq!(l.len, 4);
        let l = MemoryLayout::ga_s2s(3, 75, 60);
        assert_eq!(l.len, 288);
        assert_eq!(l.triples[74], 225..228);
        assert_eq!(l.nodes, 228..288);
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let model = Gas2s::<f64>::new(cfg(Mode::GaS2s), 1).unwrap();
        let mut tape = model.tape(false, 0);
        let input = graph_input();
        let tgt = seq(&[20, 21, EOS]);
        let loss = model.loss(&mut tape, &[&input], &[&tgt]).unwrap();
        let v = tape.scalar(loss).unwrap();
        let uniform = (40f64).ln();
        assert!(v > 0.0 && (v - uniform).abs() < 0.2 * uniform, "{v}");
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let model = Gas2s::<f64>::new(cfg(Mode::Plain), 1).unwrap();
        let mut tape = model.tape(false, 0);
        assert!(model.memory(&mut tape, &[&graph_input()]).is_err());
        let model = Gas2s::<f64>::new(cfg(Mode::GaS2s), 1).unwrap();
        let mut tape = model.tape(false, 0);
        let plain = QueryInput {
            query: seq(&[5, EOS]),
            graph: None,
        };
        assert!(model.memory(&mut tape, &[&plain]).is_err());
    }

    #[test]
    fn empty_sequences_are_rejected() {
        let model = Gas2s::<f64>::new(cfg(Mode::Plain), 1).unwrap();
        let mut tape = model.tape(false, 0);
        assert!(model.encode_batch(&mut tape, &[&seq(&[])]).is_err());
        let mem = model
            .memory(
                &mut tape,
                &[&QueryInput {
                    query: seq(&[5, EOS]),
                    graph: None,
                }],
            )
            .unwrap();
        assert!(model.decode_loss(&mut tape, &mem, &[&seq(&[])]).is_err());
    }

    #[test]
    fn plain_memory_is_encoder_output() {
        let model = Gas2s::<f64>::new(cfg(Mode::Plain), 3).unwrap();
        let mut tape = model.tape(false, 0);
        let q = seq(&[5, 6, EOS]);
        let enc = model.encode_batch(&mut tape, &[&q]).unwrap();
        let input = QueryInput { query: q, graph: None };
        let mem = model.memory(&mut tape, &[&input]).unwrap();
        assert_eq!(tape.value(mem.memory), tape.value(enc.hidden));
        assert_eq!(mem.layouts[0], MemoryLayout::sequence(3));
    }

    #[test]
    fn identical_sequences_encode_identically() {
        let model = Gas2s::<f64>::new(cfg(Mode::Plain), 3).unwrap();
        let mut tape = model.tape(false, 0);
        let a = seq(&[5, 6, 7, EOS]);
        let short = seq(&[9, EOS]);
        let enc = model.encode_batch(&mut tape, &[&a, &short, &a]).unwrap();
        let v = tape.value(enc.hidden);
        let n = 4 * 16;
        assert_eq!(&v[..n], &v[2 * n..3 * n]);
        // padding does not leak into the short sequence
        let alone = model.encode_batch(&mut tape, &[&short]).unwrap();
        let w = tape.value(alone.hidden).to_vec();
        let v = tape.value(enc.hidden);
        for (x, y) in v[n..n + 2 * 16].iter().zip(&w) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_averages_cls_states() {
        let model = Gas2s::<f64>::new(cfg(Mode::GaS2s), 3).unwrap();
        let mut tape = model.tape(false, 0);
        let sub = SampledSubgraph {
            nodes: vec![EntityId(0), EntityId(1), EntityId(2), EntityId(3)],
            query_local: 0,
            edge_endpoints: vec![[0, 1], [0, 2], [1, 1]],
            edge_relations: vec![RelationId(0), RelationId(1), RelationId(0)],
            triples: vec![],
        };
        let gb = GraphBatch::new(&[&sub], 2).unwrap();
        let u: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let v: Vec<f64> = (0..16).map(|i| 2.0 - i as f64).collect();
        let w: Vec<f64> = (0..16).map(|i| 0.5 * i as f64).collect();
        let cls = tape
            .constant([u.clone(), v.clone(), w.clone()].concat(), &[3, 16])
            .unwrap();
        let x = model.aggregate_entity_features(&mut tape, &gb, cls).unwrap();
        let x = tape.value(x);
        for j in 0..16 {
            assert!((x[j] - (u[j] + v[j]) / 2.0).abs() < 1e-12);
            // self-loop counts once
            assert!((x[16 + j] - (u[j] + w[j]) / 2.0).abs() < 1e-12);
            assert!((x[32 + j] - v[j]).abs() < 1e-12);
        }
        let fb = &model.params().by_name("graph.fallback").unwrap().data;
        assert_eq!(&x[48..64], &fb[..]);
    }

    #[test]
    fn distill_single_position_returns_value_projection() {
        let model = Gas2s::<f64>::new(cfg(Mode::GaS2s), 3).unwrap();
        let mut tape = model.tape(false, 0);
        let enc = model.encode_batch(&mut tape, &[&seq(&[EOS])]).unwrap();
        let out = model.distill(&mut tape, &enc).unwrap();
        let wv = tape.param_named("distill.v").unwrap();
        let proj = tape.matmul(enc.hidden, wv).unwrap();
        let p = tape.value(proj).to_vec();
        let o = tape.value(out);
        assert_eq!(o.len(), 3 * 16);
        for r in 0..3 {
            for j in 0..16 {
                assert!((o[r * 16 + j] - p[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rgat_rejects_out_of_range_relation() {
        let sub = SampledSubgraph {
            nodes: vec![EntityId(0), EntityId(1)],
            query_local: 0,
            edge_endpoints: vec![[0, 1]],
            edge_relations: vec![RelationId(5)],
            triples: vec![],
        };
        assert!(GraphBatch::new(&[&sub], 2).is_err());
    }

    #[test]
    fn rgat_attention_normalizes() {
        let model = Gas2s::<f64>::new(cfg(Mode::GaS2s), 5).unwrap();
        let mut tape = model.tape(false, 0);
        let input = graph_input();
        let sub = &input.graph.as_ref().unwrap().subgraph;
        let gb = GraphBatch::new(&[sub], 2).unwrap();
        let x = tape
            .leaf((0..48).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 16])
            .unwrap();
        let (out, alphas) = model.rgat_forward(&mut tape, &gb, x).unwrap();
        assert!(tape.value(out).iter().all(|v| v.is_finite()));
        let (_, dst, _) = gb.message_edges(2);
        let a = tape.value(alphas[0]);
        let heads = 2;
        for node in 0..3 {
            for h in 0..heads {
                let s: f64 = dst
                    .iter()
                    .enumerate()
                    .filter(|(_, &d)| d == node)
                    .map(|(e, _)| a[e * heads + h])
                    .sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn isolated_query_memory_is_query_block_plus_one_row() {
        let model = Gas2s::<f64>::new(cfg(Mode::GaS2s), 5).unwrap();
        let mut tape = model.tape(false, 0);
        let input = QueryInput {
            query: seq(&[5, 6, EOS]),
            graph: Some(GraphInput {
                subgraph: SampledSubgraph::singleton(EntityId(0)),
                triples: vec![],
            }),
        };
        let mem = model.memory(&mut tape, &[&input, &graph_input()]).unwrap();
        assert_eq!(mem.lens, vec![4, 3 + 6 + 3]);
        assert_eq!(tape.shape(mem.memory), &[2, 12, 16]);
    }
}
