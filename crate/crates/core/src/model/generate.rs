use std::cmp::Ordering;

use super::{DecoderMemory, Gas2s, MemoryLayout, QueryInput};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape};
use crate::verbalize::{EOS, PAD};

/// One query's frozen decoder memory, `[len, d]` row-major.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    pub data: Vec<T>,
    pub len: usize,
    pub layout: MemoryLayout,
}

/// A finished beam: token ids including the final EOS, and the exact sum
/// of step log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub ids: Vec<u32>,
    pub log_prob: f64,
}

fn by_score(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

impl<T: Real> Gas2s<T> {
    /// Inference-mode memory for a single query.
    pub fn encode_memory(&self, input: &QueryInput) -> Result<Memory<T>> {
        let mut tape = self.tape(false, 0);
        let mem = self.memory(&mut tape, &[input])?;
        Ok(Memory {
            data: tape.value(mem.memory).to_vec(),
            len: mem.lens[0],
            layout: mem.layouts[0].clone(),
        })
    }

    fn replicate(&self, tape: &mut Tape<'_, T>, mem: &Memory<T>, n: usize) -> Result<DecoderMemory> {
        let d = self.config.d_model;
        if mem.data.len() != mem.len * d {
            return Err(Error::arg("memory buffer does not match its length"));
        }
        let mut data = Vec::with_capacity(n * mem.data.len());
        for _ in 0..n {
            data.extend_from_slice(&mem.data);
        }
        let memory = tape.constant(data, &[n, mem.len, d])?;
        Ok(DecoderMemory {
            memory,
            lens: vec![mem.len; n],
            layouts: vec![mem.layout.clone(); n],
        })
    }

    /// Next-token log-probabilities after each prefix; all prefixes share
    /// one length. Row `i` has `vocab_size` entries.
    pub fn next_log_probs(&self, mem: &Memory<T>, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let t = prefixes[0].len() + 1;
        if prefixes.iter().any(|p| p.len() + 1 != t) {
            return Err(Error::arg("prefixes must share one length"));
        }
        let mut tape = self.tape(false, 0);
        let dm = self.replicate(&mut tape, mem, n)?;
        let mut inputs = Vec::with_capacity(n * t);
        for p in prefixes {
            inputs.push(PAD as usize);
            inputs.extend(p.iter().map(|&i| i as usize));
        }
        let h = self.decoder_hidden(&mut tape, &dm, &inputs, t)?;
        let last = tape.slice(h, 1, t - 1, t)?;
        let logits = self.project(&mut tape, last)?;
        let lp = tape.log_softmax(logits)?;
        let v = self.config.vocab_size;
        Ok(tape
            .value(lp)
            .chunks(v)
            .map(|row| row.iter().map(|x| x.to_f64().unwrap()).collect())
            .collect())
    }

    /// Teacher-forced log-probability of `ids`, summed over positions.
    pub fn sequence_log_prob(&self, mem: &Memory<T>, ids: &[u32]) -> Result<f64> {
        if ids.is_empty() {
            return Err(Error::arg("cannot score an empty sequence"));
        }
        let t = ids.len();
        let mut tape = self.tape(false, 0);
        let dm = self.replicate(&mut tape, mem, 1)?;
        let mut inputs = vec![PAD as usize];
        inputs.extend(ids[..t - 1].iter().map(|&i| i as usize));
        let h = self.decoder_hidden(&mut tape, &dm, &inputs, t)?;
        let logits = self.project(&mut tape, h)?;
        let lp = tape.log_softmax(logits)?;
        let v = self.config.vocab_size;
        let vals = tape.value(lp);
        Ok(ids
            .iter()
            .enumerate()
            .map(|(i, &tok)| vals[i * v + tok as usize].to_f64().unwrap())
            .sum())
    }

    /// Beam search without length normalization. Only EOS-terminated
    /// hypotheses are returned, best first; equal scores order by token ids.
    pub fn generate(&self, mem: &Memory<T>, beam_width: usize, max_new_tokens: usize) -> Result<Vec<BeamHypothesis>> {
        if beam_width < 1 {
            return Err(Error::arg("beam width must be at least 1"));
        }
        let v = self.config.vocab_size;
        let mut alive: Vec<(f64, Vec<u32>)> = vec![(0.0, Vec::new())];
        let mut finished: Vec<(f64, Vec<u32>)> = Vec::new();
        for _ in 0..max_new_tokens {
            if alive.is_empty() {
                break;
            }
            let prefixes: Vec<Vec<u32>> = alive.iter().map(|(_, p)| p.clone()).collect();
            let lps = self.next_log_probs(mem, &prefixes)?;
            let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(alive.len() * v);
            for (b, row) in lps.iter().enumerate() {
                for (tok, &lp) in row.iter().enumerate() {
                    if tok as u32 != PAD {
                        cands.push((alive[b].0 + lp, b, tok as u32));
                    }
                }
            }
            let key = |c: &(f64, usize, u32)| {
                let mut ids = alive[c.1].1.clone();
                ids.push(c.2);
                (c.0, ids)
            };
            let k = beam_width.min(cands.len());
            if cands.len() > k {
                cands.select_nth_unstable_by(k - 1, |a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap_or(Ordering::Equal)
                        .then_with(|| alive[a.1].1.cmp(&alive[b.1].1))
                        .then(a.2.cmp(&b.2))
                });
                cands.truncate(k);
            }
            let mut next: Vec<(f64, Vec<u32>)> = cands.iter().map(key).collect();
            next.sort_by(by_score);
            alive.clear();
            for (score, ids) in next {
                if ids.last() == Some(&EOS) {
                    finished.push((score, ids));
                } else {
                    alive.push((score, ids));
                }
            }
            finished.sort_by(by_score);
            finished.truncate(beam_width);
            // scores only fall as hypotheses grow
            if finished.len() == beam_width {
                let worst = finished[beam_width - 1].0;
                alive.retain(|(s, _)| *s > worst);
            }
        }
        Ok(finished
            .into_iter()
            .map(|(log_prob, ids)| BeamHypothesis { ids, log_prob })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Mode, ModelConfig};
    use crate::verbalize::TokenizedSeq;

    fn model() -> Gas2s<f64> {
        let mut c = ModelConfig::tiny(24, 2);
        c.d_model = 16;
        c.attn_heads = 2;
        c.d_ff = 32;
        c.mode = Mode::Plain;
        Gas2s::new(c, 9).unwrap()
    }

    fn mem(m: &Gas2s<f64>) -> Memory<f64> {
        let q = QueryInput {
            query: TokenizedSeq {
                ids: vec![6, 7, 8, EOS],
            },
            graph: None,
        };
        m.encode_memory(&q).unwrap()
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = model();
        let mem = mem(&m);
        let out = m.generate(&mem, 1, 6).unwrap();
        let mut prefix: Vec<u32> = Vec::new();
        for _ in 0..6 {
            let lp = &m.next_log_probs(&mem, &[prefix.clone()]).unwrap()[0];
            let mut best = 1usize;
            for (i, &x) in lp.iter().enumerate().skip(1) {
                if x > lp[best] {
                    best = i;
                }
            }
            prefix.push(best as u32);
            if best as u32 == EOS {
                break;
            }
        }
        if prefix.last() == Some(&EOS) {
            assert_eq!(out[0].ids, prefix);
        } else {
            assert!(out.is_empty());
        }
    }

    #[test]
    fn scores_match_rescoring_and_are_sorted() {
        let m = model();
        let mem = mem(&m);
        let out = m.generate(&mem, 24, 3).unwrap();
        assert!(!out.is_empty());
        for w in out.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for h in &out {
            assert_eq!(h.ids.last(), Some(&EOS));
            let r = m.sequence_log_prob(&mem, &h.ids).unwrap();
            assert!((r - h.log_prob).abs() < 1e-9, "{r} vs {}", h.log_prob);
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        let m = model();
        assert!(m.generate(&mem(&m), 0, 3).is_err());
    }
}
