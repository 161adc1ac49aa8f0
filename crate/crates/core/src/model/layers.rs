use crate::error::Result;
use crate::tensor::{Real, Tape, Var};

pub(crate) const NEG_INF: f64 = -1e9;
pub(crate) const NORM_EPS: f64 = 1e-6;

/// T5 relative-position bucket of `relative = key_pos - query_pos`.
pub fn relative_bucket(relative: i64, bidirectional: bool, num_buckets: usize, max_distance: usize) -> usize {
    let mut buckets = num_buckets as i64;
    let mut ret = 0i64;
    let mut n = -relative;
    if bidirectional {
        buckets /= 2;
        if n < 0 {
            ret += buckets;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = buckets / 2;
    if n < max_exact {
        ret += n;
    } else {
        let scaled = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln()
            * (buckets - max_exact) as f64;
        ret += (max_exact + scaled as i64).min(buckets - 1);
    }
    ret as usize
}

#[derive(Clone, Debug)]
pub(crate) struct AttnIdx {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIdx {
    pub ln_self: usize,
    pub self_attn: AttnIdx,
    pub cross: Option<(usize, AttnIdx)>,
    pub ln_ff: usize,
    pub wi: usize,
    pub wo: usize,
}

/// `rms_norm(x) * gain`.
pub(crate) fn norm<T: Real>(tape: &mut Tape<'_, T>, x: Var, gain: usize) -> Result<Var> {
    let n = tape.rms_norm(x, NORM_EPS)?;
    let g = tape.param(gain)?;
    tape.mul(n, g)
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: usize) -> Result<Var> {
    let w = tape.param(w)?;
    tape.matmul(x, w)
}

pub(crate) fn feed_forward<T: Real>(tape: &mut Tape<'_, T>, x: Var, wi: usize, wo: usize) -> Result<Var> {
    let h = linear(tape, x, wi)?;
    let h = tape.gelu(h)?;
    linear(tape, h, wo)
}

/// `[B, L, H·dh] -> [B, H, L, dh]`
fn split_heads<T: Real>(tape: &mut Tape<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[b, l, heads, d / heads])?;
    tape.transpose(x, 1, 2)
}

fn merge_heads<T: Real>(tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, h, l, dh) = (s[0], s[1], s[2], s[3]);
    let x = tape.transpose(x, 1, 2)?;
    tape.reshape(x, &[b, l, h * dh])
}

/// Multi-head scaled dot-product attention of `xq` `[B, Lq, d]` over `xkv`
/// `[B, Lk, d]`. `bias` broadcasts against `[B, H, Lq, Lk]` scores and
/// carries position bias and masking.
pub(crate) fn attention<T: Real>(
    tape: &mut Tape<'_, T>,
    xq: Var,
    xkv: Var,
    idx: &AttnIdx,
    heads: usize,
    biases: &[Var],
) -> Result<Var> {
    let q = linear(tape, xq, idx.q)?;
    let k = linear(tape, xkv, idx.k)?;
    let v = linear(tape, xkv, idx.v)?;
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let dh = tape.shape(q)[3];
    let scores = tape.matmul_nt(q, k)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    for &b in biases {
        scores = tape.add(scores, b)?;
    }
    let attn = tape.softmax(scores)?;
    let out = tape.matmul(attn, v)?;
    let out = merge_heads(tape, out)?;
    linear(tape, out, idx.o)
}

/// Position bias `[H, Lq, Lk]` from a `[buckets, H]` table.
pub(crate) fn position_bias<T: Real>(
    tape: &mut Tape<'_, T>,
    table: usize,
    lq: usize,
    lk: usize,
    q_offset: usize,
    bidirectional: bool,
    buckets: usize,
    max_distance: usize,
) -> Result<Var> {
    let mut ids = Vec::with_capacity(lq * lk);
    for i in 0..lq {
        for j in 0..lk {
            let rel = j as i64 - (i + q_offset) as i64;
            ids.push(relative_bucket(rel, bidirectional, buckets, max_distance));
        }
    }
    let t = tape.param(table)?;
    let heads = tape.shape(t)[1];
    let g = tape.gather_rows(t, &ids)?;
    let g = tape.reshape(g, &[lq, lk, heads])?;
    tape.permute(g, &[2, 0, 1])
}

/// Additive key mask `[B, 1, 1, Lk]`: 0 for valid keys, a large negative
/// value for padding.
pub(crate) fn key_mask<T: Real>(tape: &mut Tape<'_, T>, lens: &[usize], lk: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(lens.len() * lk);
    for &len in lens {
        data.extend((0..lk).map(|j| if j < len { T::zero() } else { T::of(NEG_INF) }));
    }
    tape.constant(data, &[lens.len(), 1, 1, lk])
}

/// Additive causal mask `[Lq, Lk]` for positions `q_offset..q_offset+Lq`.
pub(crate) fn causal_mask<T: Real>(tape: &mut Tape<'_, T>, lq: usize, lk: usize, q_offset: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(lq * lk);
    for i in 0..lq {
        data.extend((0..lk).map(|j| if j <= i + q_offset { T::zero() } else { T::of(NEG_INF) }));
    }
    tape.constant(data, &[lq, lk])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_match_reference_values() {
        // exact region
        assert_eq!(relative_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_bucket(-3, true, 32, 128), 3);
        assert_eq!(relative_bucket(3, true, 32, 128), 19);
        // log region and saturation
        assert_eq!(relative_bucket(-200, true, 32, 128), 15);
        assert_eq!(relative_bucket(200, true, 32, 128), 31);
        // unidirectional: future keys collapse to bucket 0
        assert_eq!(relative_bucket(5, false, 32, 128), 0);
        assert_eq!(relative_bucket(-5, false, 32, 128), 5);
        assert_eq!(relative_bucket(-1000, false, 32, 128), 31);
    }

    #[test]
    fn buckets_are_monotone_in_distance() {
        let mut prev = 0;
        for d in 0..300 {
            let b = relative_bucket(-d, true, 32, 128);
            assert!(b >= prev);
            prev = b;
        }
    }
}
