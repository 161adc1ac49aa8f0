//! Byte-level pair-merge tokenizer with reserved structural tokens.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const CLS: u32 = 3;
pub const SEP: u32 = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "|";

pub const RESERVED: [&str; 5] = [PAD_TOKEN, EOS_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];
pub const MAX_LEN: usize = 512;
pub const DEFAULT_VOCAB_SIZE: usize = 8000;

const FORMAT_VERSION: u32 = 1;

/// Token ids of one encoded text, always terminated by [`EOS`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedSeq {
    pub ids: Vec<u32>,
}

impl TokenizedSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    reserved: Vec<String>,
    alphabet: Vec<u8>,
    merges: Vec<[u32; 2]>,
    vocab_size: usize,
}

/// Trained token table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    alphabet: Vec<u8>,
    byte_to_id: [Option<u32>; 256],
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
    /// byte expansion of every non-reserved token
    pieces: Vec<Vec<u8>>,
}

/// Memo of already-encoded text segments, keyed by segment text.
#[derive(Default)]
pub struct SegmentCache {
    map: HashMap<String, Vec<u32>>,
}

/// Splits a segment into merge units: a word carries at most one leading
/// space; extra spaces form their own units.
fn words(segment: &str) -> Vec<&str> {
    let bytes = segment.as_bytes();
    let n = bytes.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if bytes[i] == b' ' {
            let mut j = i;
            while j < n && bytes[j] == b' ' {
                j += 1;
            }
            if j == n {
                out.push(&segment[i..j]);
                break;
            }
            if j - i > 1 {
                out.push(&segment[i..j - 1]);
            }
            i = j - 1;
        }
        let mut j = i + 1;
        while j < n && bytes[j] != b' ' {
            j += 1;
        }
        out.push(&segment[i..j]);
        i = j;
    }
    out
}

/// Splits text at the reserved `|` token. A leading `[CLS]` is returned
/// separately; elsewhere `[CLS]` is plain text.
fn segments(text: &str) -> (bool, Vec<&str>) {
    let (cls, rest) = match text.strip_prefix(CLS_TOKEN) {
        Some(rest) => (true, rest),
        None => (false, text),
    };
    (cls, rest.split(SEP_TOKEN).collect())
}

impl Vocabulary {
    fn from_parts(alphabet: Vec<u8>, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut byte_to_id = [None; 256];
        let mut pieces: Vec<Vec<u8>> = Vec::new();
        let base = RESERVED.len() as u32;
        for (i, &b) in alphabet.iter().enumerate() {
            if byte_to_id[b as usize].is_some() {
                return Err(Error::arg(format!("duplicate alphabet byte {b}")));
            }
            byte_to_id[b as usize] = Some(base + i as u32);
            pieces.push(vec![b]);
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let next = base + pieces.len() as u32;
            if l < base || r < base || l >= next || r >= next {
                return Err(Error::arg(format!("merge {rank} references an invalid token")));
            }
            let mut p = pieces[(l - base) as usize].clone();
            p.extend_from_slice(&pieces[(r - base) as usize]);
            pieces.push(p);
            merge_rank.insert((l, r), rank as u32);
        }
        Ok(Vocabulary {
            alphabet,
            byte_to_id,
            merges,
            merge_rank,
            pieces,
        })
    }

    pub fn size(&self) -> usize {
        RESERVED.len() + self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Byte expansion of a token, `None` for reserved ids.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        let base = RESERVED.len() as u32;
        if id < base {
            return None;
        }
        self.pieces.get((id - base) as usize).map(Vec::as_slice)
    }

    fn merge_id(&self, rank: u32) -> u32 {
        RESERVED.len() as u32 + self.alphabet.len() as u32 + rank
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word
            .bytes()
            .map(|b| self.byte_to_id[b as usize].unwrap_or(UNK))
            .collect();
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0], w[1])).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = self.merges[rank as usize];
            let id = self.merge_id(rank);
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    merged.push(id);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            syms = merged;
        }
        out.extend(syms);
    }

    fn encode_segment(&self, segment: &str, out: &mut Vec<u32>) {
        for w in words(segment) {
            self.encode_word(w, out);
        }
    }

    fn encode_impl(&self, text: &str, max_len: usize, mut cache: Option<&mut SegmentCache>) -> TokenizedSeq {
        let (cls, segs) = segments(text);
        let mut ids = Vec::new();
        if cls {
            ids.push(CLS);
        }
        for (i, seg) in segs.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            match cache.as_deref_mut() {
                Some(c) => {
                    if let Some(hit) = c.map.get(*seg) {
                        ids.extend_from_slice(hit);
                    } else {
                        let mut tmp = Vec::new();
                        self.encode_segment(seg, &mut tmp);
                        ids.extend_from_slice(&tmp);
                        c.map.insert(seg.to_string(), tmp);
                    }
                }
                None => self.encode_segment(seg, &mut ids),
            }
        }
        let max_len = max_len.max(1);
        ids.truncate(max_len - 1);
        ids.push(EOS);
        TokenizedSeq { ids }
    }

    /// Encodes `text`, appending [`EOS`] and truncating to `max_len` ids
    /// (the final id is always [`EOS`]). Bytes outside the trained alphabet
    /// become [`UNK`].
    pub fn encode(&self, text: &str, max_len: usize) -> TokenizedSeq {
        self.encode_impl(text, max_len, None)
    }

    /// [`Vocabulary::encode`] with a segment memo; output is identical.
    pub fn encode_cached(&self, text: &str, max_len: usize, cache: &mut SegmentCache) -> TokenizedSeq {
        self.encode_impl(text, max_len, Some(cache))
    }

    /// Inverse of [`Vocabulary::encode`]; stops at the first [`EOS`] and
    /// skips padding.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id {
                EOS => break,
                PAD => {}
                UNK => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                CLS => bytes.extend_from_slice(CLS_TOKEN.as_bytes()),
                SEP => bytes.extend_from_slice(SEP_TOKEN.as_bytes()),
                other => {
                    if let Some(p) = self.piece(other) {
                        bytes.extend_from_slice(p);
                    }
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = VocabFile {
            version: FORMAT_VERSION,
            reserved: RESERVED.iter().map(|s| s.to_string()).collect(),
            alphabet: self.alphabet.clone(),
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            vocab_size: self.size(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::json("vocabulary", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if file.version != FORMAT_VERSION {
            return Err(Error::arg(format!("unsupported vocabulary version {}", file.version)));
        }
        if file.reserved != RESERVED {
            return Err(Error::arg("vocabulary reserved tokens do not match"));
        }
        let vocab = Vocabulary::from_parts(file.alphabet, file.merges.into_iter().map(|[l, r]| (l, r)).collect())?;
        if vocab.size() != file.vocab_size {
            return Err(Error::arg(format!(
                "vocabulary declares {} entries but defines {}",
                file.vocab_size,
                vocab.size()
            )));
        }
        Ok(vocab)
    }
}

/// Learns pair merges until the vocabulary holds `vocab_size` entries (or no
/// adjacent pair is left to merge). Reserved tokens never take part in merge
/// statistics. Ties between equally frequent pairs go to the smallest
/// `(left, right)` id pair, so training is deterministic.
pub fn train_tokenizer<'a>(corpus: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Result<Vocabulary> {
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    let mut seen_bytes = [false; 256];
    let mut any = false;
    for text in corpus {
        any = true;
        let (_, segs) = segments(text);
        for seg in segs {
            for w in words(seg) {
                for b in w.bytes() {
                    seen_bytes[b as usize] = true;
                }
                *word_freq.entry(w).or_default() += 1;
            }
        }
    }
    if !any {
        return Err(Error::arg("tokenizer corpus is empty"));
    }
    let alphabet: Vec<u8> = (0..=255u8).filter(|&b| seen_bytes[b as usize]).collect();
    let floor = RESERVED.len() + alphabet.len();
    if vocab_size <= floor {
        return Err(Error::arg(format!(
            "vocab_size {vocab_size} must exceed {} reserved tokens + {} distinct bytes",
            RESERVED.len(),
            alphabet.len()
        )));
    }
    let base = RESERVED.len() as u32;
    let mut byte_id = [0u32; 256];
    for (i, &b) in alphabet.iter().enumerate() {
        byte_id[b as usize] = base + i as u32;
    }

    let mut entries: Vec<(&str, u64)> = word_freq.into_iter().collect();
    entries.sort_unstable();
    let freqs: Vec<i64> = entries.iter().map(|&(_, f)| f as i64).collect();
    let mut words: Vec<Vec<u32>> = entries
        .iter()
        .map(|(w, _)| w.bytes().map(|b| byte_id[b as usize]).collect())
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.windows(2) {
            let key = (p[0], p[1]);
            *counts.entry(key).or_default() += freqs[wi];
            where_.entry(key).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> = counts.iter().map(|(&k, &c)| (c, Reverse(k))).collect();

    let mut merges = Vec::new();
    let mut next_id = floor as u32;
    while (next_id as usize) < vocab_size {
        let Some((c, Reverse(pair))) = heap.pop() else { break };
        if counts.get(&pair).copied().unwrap_or(0) != c || c <= 0 {
            continue;
        }
        merges.push(pair);
        let new_id = next_id;
        next_id += 1;
        let affected: Vec<usize> = {
            let mut v: Vec<usize> = where_.remove(&pair).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let f = freqs[wi];
            let old = std::mem::take(&mut words[wi]);
            for p in old.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_default() -= f;
                touched.insert(key);
                if let Some(s) = where_.get_mut(&key) {
                    s.remove(&wi);
                }
            }
            let mut merged = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(old[i]);
                    i += 1;
                }
            }
            for p in merged.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_default() += f;
                touched.insert(key);
                where_.entry(key).or_default().insert(wi);
            }
            words[wi] = merged;
        }
        counts.remove(&pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            if let Some(&c) = counts.get(&key) {
                if c > 0 && key != pair {
                    heap.push((c, Reverse(key)));
                }
            }
        }
    }
    if (next_id as usize) < vocab_size {
        log::warn!(
            "corpus exhausted after {} merges; vocabulary holds {} of {} requested entries",
            merges.len(),
            next_id,
            vocab_size
        );
    }
    Vocabulary::from_parts(alphabet, merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_split_keeps_every_byte() {
        for s in ["", " ", "a", "  a  b ", "Predict tail: Michael Jackson ", "x  y"] {
            assert_eq!(words(s).concat(), s);
        }
        assert_eq!(words(" Michael Jackson "), vec![" Michael", " Jackson", " "]);
        assert_eq!(words("a   b"), vec!["a", "  ", " b"]);
    }

    #[test]
    fn single_symbol_corpus_merges() {
        let v = train_tokenizer(["aaaa"], RESERVED.len() + 2).unwrap();
        assert_eq!(v.merges().len(), 1);
        let enc = v.encode("aaaa", MAX_LEN);
        assert!(enc.len() - 1 < 4);
        assert_eq!(v.decode(&enc.ids), "aaaa");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["aaaa", "abab abba", "[CLS] a | b | c"];
        let a = train_tokenizer(corpus, 20).unwrap();
        let b = train_tokenizer(corpus, 20).unwrap();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn too_small_vocab_is_rejected() {
        assert!(matches!(train_tokenizer(["abc"], 8), Err(Error::Argument(_))));
        assert!(train_tokenizer(std::iter::empty(), 100).is_err());
    }

    #[test]
    fn empty_text_is_just_eos() {
        let v = train_tokenizer(["hello"], 12).unwrap();
        assert_eq!(v.encode("", MAX_LEN).ids, vec![EOS]);
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = train_tokenizer(["ab"], 8).unwrap();
        let long = "a b ".repeat(400);
        let enc = v.encode(&long, MAX_LEN);
        assert_eq!(enc.len(), MAX_LEN);
        assert_eq!(*enc.ids.last().unwrap(), EOS);
    }

    #[test]
    fn structural_tokens_are_atomic() {
        let v = train_tokenizer(["[CLS] a | b | c"], 40).unwrap();
        let enc = v.encode("[CLS] a | b | c", MAX_LEN);
        assert_eq!(enc.ids[0], CLS);
        assert_eq!(enc.ids.iter().filter(|&&t| t == SEP).count(), 2);
        assert_eq!(enc.ids.iter().filter(|&&t| t == CLS).count(), 1);
        // "[CLS]" away from the start is ordinary text
        let mid = v.encode("a [CLS]", MAX_LEN);
        assert!(!mid.ids.contains(&CLS));
    }

    #[test]
    fn unknown_bytes_become_unk() {
        let v = train_tokenizer(["abc"], 12).unwrap();
        assert!(v.encode("abz", MAX_LEN).ids.contains(&UNK));
    }
}
