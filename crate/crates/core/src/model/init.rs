use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{Mode, ModelConfig};
use super::layers::{AttnIdx, BlockIdx};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, ParamTensor, Real};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub(crate) struct RgatIdx {
    /// `[2R+1, d, d]` per-relation message transforms
    pub rel_w: usize,
    /// `[d, d]` transform of the receiving node
    pub self_w: usize,
    /// `[H, d/H]` attention vectors over receiver and message halves
    pub att_self: usize,
    pub att_msg: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct GraphIdx {
    pub distill_q: usize,
    pub distill_k: usize,
    pub distill_v: usize,
    pub fallback: usize,
    pub rgat: Vec<RgatIdx>,
}

/// Parameter positions, resolved once by name.
#[derive(Clone, Debug)]
pub(crate) struct Index {
    pub embed: usize,
    pub enc_bias: usize,
    pub enc: Vec<BlockIdx>,
    pub enc_ln: usize,
    pub dec_bias: usize,
    pub dec: Vec<BlockIdx>,
    pub dec_ln: usize,
    pub graph: Option<GraphIdx>,
}

/// Every parameter name with its shape, in canonical order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("shared.embedding".into(), vec![cfg.vocab_size, d], Init::Normal);
    push(
        "encoder.relative_bias".into(),
        vec![cfg.relative_buckets, cfg.attn_heads],
        Init::Normal,
    );
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["q", "k", "v", "o"] {
            push(format!("{p}.{w}"), vec![d, d], Init::Normal);
        }
    };
    for i in 0..cfg.encoder_layers {
        let p = format!("encoder.layers.{i}");
        push(format!("{p}.ln_self"), vec![d], Init::Ones);
        attn(&mut push, &format!("{p}.self_attn"));
        push(format!("{p}.ln_ff"), vec![d], Init::Ones);
        push(format!("{p}.ff.wi"), vec![d, cfg.d_ff], Init::Normal);
        push(format!("{p}.ff.wo"), vec![cfg.d_ff, d], Init::Normal);
    }
    push("encoder.final_ln".into(), vec![d], Init::Ones);
    push(
        "decoder.relative_bias".into(),
        vec![cfg.relative_buckets, cfg.attn_heads],
        Init::Normal,
    );
    for i in 0..cfg.decoder_layers {
        let p = format!("decoder.layers.{i}");
        push(format!("{p}.ln_self"), vec![d], Init::Ones);
        attn(&mut push, &format!("{p}.self_attn"));
        push(format!("{p}.ln_cross"), vec![d], Init::Ones);
        attn(&mut push, &format!("{p}.cross_attn"));
        push(format!("{p}.ln_ff"), vec![d], Init::Ones);
        push(format!("{p}.ff.wi"), vec![d, cfg.d_ff], Init::Normal);
        push(format!("{p}.ff.wo"), vec![cfg.d_ff, d], Init::Normal);
    }
    push("decoder.final_ln".into(), vec![d], Init::Ones);
    if cfg.mode == Mode::GaS2s {
        push("distill.queries".into(), vec![cfg.m, d], Init::Normal);
        push("distill.k".into(), vec![d, d], Init::Normal);
        push("distill.v".into(), vec![d, d], Init::Normal);
        push("graph.fallback".into(), vec![1, d], Init::Normal);
        let dh = d / cfg.rgat_heads;
        for i in 0..cfg.rgat_layers {
            let p = format!("rgat.layers.{i}");
            push(
                format!("{p}.relation_w"),
                vec![cfg.rgat_relations(), d, d],
                Init::Normal,
            );
            push(format!("{p}.self_w"), vec![d, d], Init::Normal);
            push(format!("{p}.att_self"), vec![cfg.rgat_heads, dh], Init::Uniform(d));
            push(format!("{p}.att_msg"), vec![cfg.rgat_heads, dh], Init::Uniform(d));
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// truncated normal, std 0.02, cut at two standard deviations
    Normal,
    Ones,
    /// uniform in ±1/√fan
    Uniform(usize),
}

pub(crate) fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Ones => vec![T::one(); n],
            Init::Normal => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break T::of(z * INIT_STD);
                    }
                })
                .collect(),
            Init::Uniform(fan) => {
                let a = 1.0 / (fan as f64).sqrt();
                (0..n).map(|_| T::of(rng.gen_range(-a..a))).collect()
            }
        };
        store.insert(name, ParamTensor::new(shape, data)?)?;
    }
    Ok(store)
}

/// Checks names and shapes against the config and resolves the index.
pub(crate) fn resolve<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Index> {
    let expected = layout(cfg);
    if expected.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors for this config, found {}",
            expected.len(),
            store.len()
        )));
    }
    for (name, shape, _) in &expected {
        match store.by_name(name) {
            Some(p) if &p.shape == shape => {}
            Some(p) => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config needs {shape:?}",
                    p.shape
                )))
            }
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
        }
    }
    let at = |name: &str| store.index_of(name).expect("validated above");
    let attn = |p: &str| AttnIdx {
        q: at(&format!("{p}.q")),
        k: at(&format!("{p}.k")),
        v: at(&format!("{p}.v")),
        o: at(&format!("{p}.o")),
    };
    let block = |p: String, cross: bool| BlockIdx {
        ln_self: at(&format!("{p}.ln_self")),
        self_attn: attn(&format!("{p}.self_attn")),
        cross: cross.then(|| (at(&format!("{p}.ln_cross")), attn(&format!("{p}.cross_attn")))),
        ln_ff: at(&format!("{p}.ln_ff")),
        wi: at(&format!("{p}.ff.wi")),
        wo: at(&format!("{p}.ff.wo")),
    };
    let graph = (cfg.mode == Mode::GaS2s).then(|| GraphIdx {
        distill_q: at("distill.queries"),
        distill_k: at("distill.k"),
        distill_v: at("distill.v"),
        fallback: at("graph.fallback"),
        rgat: (0..cfg.rgat_layers)
            .map(|i| {
                let p = format!("rgat.layers.{i}");
                RgatIdx {
                    rel_w: at(&format!("{p}.relation_w")),
                    self_w: at(&format!("{p}.self_w")),
                    att_self: at(&format!("{p}.att_self")),
                    att_msg: at(&format!("{p}.att_msg")),
                }
            })
            .collect(),
    });
    Ok(Index {
        embed: at("shared.embedding"),
        enc_bias: at("encoder.relative_bias"),
        enc: (0..cfg.encoder_layers)
            .map(|i| block(format!("encoder.layers.{i}"), false))
            .collect(),
        enc_ln: at("encoder.final_ln"),
        dec_bias: at("decoder.relative_bias"),
        dec: (0..cfg.decoder_layers)
            .map(|i| block(format!("decoder.layers.{i}"), true))
            .collect(),
        dec_ln: at("decoder.final_ln"),
        graph,
    })
}
