//! C ABI over the gas2s core.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `*_load`/`*_train` function and released by the matching `*_free`.
//! Functions return a [`Gas2sStatus`]; on failure the message is kept per
//! thread and read with [`gas2s_last_error_message`]. Strings returned
//! through `char **` out-parameters are owned by the caller and released
//! with [`gas2s_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gas2s::error::Error;
use gas2s::eval::{evaluate_split, longest_mention, predict, EvalConfig, EvalQuery, MetricsReport};
use gas2s::features::LinkQuery;
use gas2s::kg::{load_dataset, Direction, KnowledgeGraph, Split};
use gas2s::model::checkpoint::Checkpoint;
use gas2s::model::Gas2s;
use gas2s::verbalize::{mention_corpus, train_tokenizer, SegmentCache, Vocabulary};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gas2sStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Config = 6,
    Numeric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

pub struct Gas2sGraph(KnowledgeGraph);
pub struct Gas2sVocab(Vocabulary);
pub struct Gas2sModel(Gas2s<f32>);
pub struct Gas2sMetrics(MetricsReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> Gas2sStatus {
    match e {
        Error::Argument(_) | Error::Shape { .. } | Error::Unlabeled(_) => Gas2sStatus::InvalidArgument,
        Error::Io { .. } => Gas2sStatus::Io,
        Error::Parse { .. } | Error::Json { .. } => Gas2sStatus::Parse,
        Error::Checkpoint(_) => Gas2sStatus::Checkpoint,
        Error::Config(_) => Gas2sStatus::Config,
        Error::NonFiniteLoss { .. } => Gas2sStatus::Numeric,
    }
}

struct Fail(Gas2sStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> Gas2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            Gas2sStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            Gas2sStatus::Panic
        }
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(Gas2sStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(Gas2sStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn arg_ref<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(Gas2sStatus::NullPointer, format!("{name} is null")))
}

unsafe fn put<T>(out: *mut T, v: T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(Gas2sStatus::NullPointer, format!("{name} is null")));
    }
    out.write(v);
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(Gas2sStatus::InvalidArgument, msg.into())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`) and returns the full message length
/// without the terminator; 0 when the last call succeeded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gas2s_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gas2s_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_graph_load(dir: *const c_char, out: *mut *mut Gas2sGraph) -> Gas2sStatus {
    guard(|| {
        let dir = arg_str(dir, "dir")?;
        let g = load_dataset(dir)?;
        put(out, Box::into_raw(Box::new(Gas2sGraph(g))), "out")
    })
}

/// # Safety
/// `g` must be null or a handle from [`gas2s_graph_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn gas2s_graph_free(g: *mut Gas2sGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// # Safety
/// `g` must be a live graph handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_graph_counts(
    g: *const Gas2sGraph,
    entities: *mut usize,
    relations: *mut usize,
) -> Gas2sStatus {
    guard(|| {
        let g = &arg_ref(g, "graph")?.0;
        put(entities, g.num_entities(), "entities")?;
        put(relations, g.num_relations(), "relations")
    })
}

/// Graph statistics as a JSON object.
///
/// # Safety
/// `g` must be a live graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_graph_stats_json(g: *const Gas2sGraph, out: *mut *mut c_char) -> Gas2sStatus {
    guard(|| {
        let g = &arg_ref(g, "graph")?.0;
        let stats = g.graph_stats()?;
        let text = serde_json::to_string(&stats).map_err(|e| invalid(e.to_string()))?;
        put(out, c_string(text), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_load(path: *const c_char, out: *mut *mut Gas2sVocab) -> Gas2sStatus {
    guard(|| {
        let v = Vocabulary::load(arg_str(path, "path")?)?;
        put(out, Box::into_raw(Box::new(Gas2sVocab(v))), "out")
    })
}

/// Trains a tokenizer on the graph's entity and relation mentions.
///
/// # Safety
/// `g` must be a live graph handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_train(
    g: *const Gas2sGraph,
    vocab_size: usize,
    out: *mut *mut Gas2sVocab,
) -> Gas2sStatus {
    guard(|| {
        let g = &arg_ref(g, "graph")?.0;
        let corpus = mention_corpus(g.mentions());
        let v = train_tokenizer(corpus.iter().map(String::as_str), vocab_size)?;
        put(out, Box::into_raw(Box::new(Gas2sVocab(v))), "out")
    })
}

/// # Safety
/// `v` must be a live vocabulary handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_save(v: *const Gas2sVocab, path: *const c_char) -> Gas2sStatus {
    guard(|| {
        let v = &arg_ref(v, "vocab")?.0;
        v.save(arg_str(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `v` must be a live vocabulary handle; `size` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_size(v: *const Gas2sVocab, size: *mut usize) -> Gas2sStatus {
    guard(|| put(size, arg_ref(v, "vocab")?.0.size(), "size"))
}

/// Encodes `text` (EOS appended). Writes up to `cap` ids and the full
/// length to `len`; returns `BUFFER_TOO_SMALL` when `cap` is short.
///
/// # Safety
/// `ids` must be null or point to `cap` writable `u32`s.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_encode(
    v: *const Gas2sVocab,
    text: *const c_char,
    ids: *mut u32,
    cap: usize,
    len: *mut usize,
) -> Gas2sStatus {
    guard(|| {
        let v = &arg_ref(v, "vocab")?.0;
        let seq = v.encode(arg_str(text, "text")?, gas2s::verbalize::MAX_LEN);
        put(len, seq.ids.len(), "len")?;
        if seq.ids.len() > cap || (ids.is_null() && !seq.ids.is_empty()) {
            return Err(Fail(
                Gas2sStatus::BufferTooSmall,
                format!("{} ids do not fit in {cap}", seq.ids.len()),
            ));
        }
        ptr::copy_nonoverlapping(seq.ids.as_ptr(), ids, seq.ids.len());
        Ok(())
    })
}

/// Decodes ids back to text.
///
/// # Safety
/// `ids` must point to `n` readable `u32`s; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_decode(
    v: *const Gas2sVocab,
    ids: *const u32,
    n: usize,
    out: *mut *mut c_char,
) -> Gas2sStatus {
    guard(|| {
        let v = &arg_ref(v, "vocab")?.0;
        let ids = if n == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(arg_ref(ids, "ids")?, n)
        };
        put(out, c_string(v.decode(ids)), "out")
    })
}

/// # Safety
/// `v` must be null or a vocabulary handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn gas2s_vocab_free(v: *mut Gas2sVocab) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

/// Loads a checkpoint and checks it against the graph and vocabulary.
///
/// # Safety
/// Handles must be live; `path` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_model_load(
    path: *const c_char,
    g: *const Gas2sGraph,
    v: *const Gas2sVocab,
    out: *mut *mut Gas2sModel,
) -> Gas2sStatus {
    guard(|| {
        let path = arg_str(path, "path")?;
        let g = &arg_ref(g, "graph")?.0;
        let v = &arg_ref(v, "vocab")?.0;
        let ck = Checkpoint::<f32>::load(path)?;
        if ck.config.num_relations != g.num_relations().max(1) || ck.config.vocab_size != v.size() {
            return Err(Fail(
                Gas2sStatus::Checkpoint,
                "checkpoint does not match the graph or vocabulary".into(),
            ));
        }
        let m = Gas2s::from_params(ck.config, ck.params)?;
        put(out, Box::into_raw(Box::new(Gas2sModel(m))), "out")
    })
}

/// # Safety
/// `m` must be null or a model handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn gas2s_model_free(m: *mut Gas2sModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

fn parse_direction(d: u32) -> Result<Direction, Fail> {
    match d {
        0 => Ok(Direction::Tail),
        1 => Ok(Direction::Head),
        _ => Err(invalid(format!("direction must be 0 (tail) or 1 (head), got {d}"))),
    }
}

/// Ranks answers for `(entity, relation, ?)` (`direction` 0) or
/// `(?, relation, entity)` (`direction` 1). Entity and relation are raw
/// ids or mentions. Writes a JSON array of
/// `{"rank", "mention", "entity", "log_prob"}` objects, at most `top_k`.
/// With `filtered` nonzero, answers known in any split are skipped.
///
/// # Safety
/// Handles must be live; strings NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_predict(
    m: *const Gas2sModel,
    g: *const Gas2sGraph,
    v: *const Gas2sVocab,
    entity: *const c_char,
    relation: *const c_char,
    direction: u32,
    top_k: usize,
    beam_width: usize,
    filtered: i32,
    seed: u64,
    out: *mut *mut c_char,
) -> Gas2sStatus {
    guard(|| {
        let model = &arg_ref(m, "model")?.0;
        let g = &arg_ref(g, "graph")?.0;
        let vocab = &arg_ref(v, "vocab")?.0;
        let es = arg_str(entity, "entity")?;
        let rs = arg_str(relation, "relation")?;
        let direction = parse_direction(direction)?;
        let e = g
            .entity_by_raw(es)
            .or_else(|| g.mentions().entity_by_mention(es))
            .ok_or_else(|| invalid(format!("unknown entity {es:?}")))?;
        let r = g
            .relation_by_raw(rs)
            .or_else(|| g.mentions().relation_by_mention(rs))
            .ok_or_else(|| invalid(format!("unknown relation {rs:?}")))?;
        let q = LinkQuery {
            entity: e,
            relation: r,
            direction,
            answer: e,
        };
        let mut rows = Vec::new();
        if top_k > 0 {
            let cfg = EvalConfig {
                beam_width: beam_width.max(top_k),
                ..EvalConfig::default()
            };
            let max_new = longest_mention(g, vocab, model.config().max_len);
            let cands = predict(g, vocab, model, &q, &cfg, seed, max_new, &mut SegmentCache::default())?;
            let known = EvalQuery::new(g, q).filter;
            let mut seen = std::collections::HashSet::new();
            for (text, lp) in cands {
                let Some(id) = g.mentions().entity_by_mention(&text) else {
                    continue;
                };
                if !seen.insert(id) || (filtered != 0 && known.contains(&id)) {
                    continue;
                }
                rows.push(serde_json::json!({
                    "rank": rows.len() + 1,
                    "mention": text,
                    "entity": g.entity_raw(id),
                    "log_prob": lp,
                }));
                if rows.len() == top_k {
                    break;
                }
            }
        }
        put(out, c_string(serde_json::Value::Array(rows).to_string()), "out")
    })
}

/// Filtered evaluation of a split (0 train, 1 valid, 2 test).
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_evaluate(
    m: *const Gas2sModel,
    g: *const Gas2sGraph,
    v: *const Gas2sVocab,
    split: u32,
    beam_width: usize,
    seed: u64,
    out: *mut *mut Gas2sMetrics,
) -> Gas2sStatus {
    guard(|| {
        let model = &arg_ref(m, "model")?.0;
        let g = &arg_ref(g, "graph")?.0;
        let vocab = &arg_ref(v, "vocab")?.0;
        let split = match split {
            0 => Split::Train,
            1 => Split::Valid,
            2 => Split::Test,
            _ => return Err(invalid(format!("split must be 0, 1 or 2, got {split}"))),
        };
        let cfg = EvalConfig {
            beam_width,
            seed,
            ..EvalConfig::default()
        };
        let outcome = evaluate_split(g, vocab, model, split, &cfg)?;
        put(out, Box::into_raw(Box::new(Gas2sMetrics(outcome.overall))), "out")
    })
}

/// # Safety
/// `r` must be a live metrics handle; out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn gas2s_metrics_get(
    r: *const Gas2sMetrics,
    mrr: *mut f64,
    hits1: *mut f64,
    hits3: *mut f64,
    hits10: *mut f64,
    query_count: *mut usize,
) -> Gas2sStatus {
    guard(|| {
        let r = &arg_ref(r, "metrics")?.0;
        put(mrr, r.mrr, "mrr")?;
        put(hits1, r.hits_at(1), "hits1")?;
        put(hits3, r.hits_at(3), "hits3")?;
        put(hits10, r.hits_at(10), "hits10")?;
        put(query_count, r.query_count, "query_count")
    })
}

/// # Safety
/// `r` must be null or a metrics handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn gas2s_metrics_free(r: *mut Gas2sMetrics) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}
