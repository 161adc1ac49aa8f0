use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Storage<T> {
    Owned(Vec<T>),
    Param(usize),
}

enum Bcast {
    Same,
    /// rhs repeats every `n` elements of lhs
    RightSuffix(usize),
    LeftSuffix(usize),
    General {
        ao: Vec<usize>,
        bo: Vec<usize>,
    },
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Sub {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Bcast,
    },
    Scale {
        a: Var,
        c: T,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
        scale: T,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    RmsNorm {
        a: Var,
        inv: Vec<T>,
    },
    Relu {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        alpha: T,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        src: Var,
        idx: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    SegmentSoftmax {
        a: Var,
        seg: Vec<usize>,
        nseg: usize,
    },
    RelMatMul {
        x: Var,
        w: Var,
        groups: Vec<(usize, Vec<usize>)>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    storage: Storage<T>,
    op: Op<T>,
    grad: bool,
}

/// Reverse-mode differentiation record.
///
/// Every operation appends a node holding its forward value; `backward`
/// walks the nodes in reverse insertion order, which is a topological order
/// by construction.
pub struct Tape<'p, T: Real> {
    nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of parameter `idx`; `None` when the parameter was never used
    /// or is unreachable from the loss.
    pub fn param(&self, idx: usize) -> Option<&[T]> {
        self.param_nodes.get(idx).copied().flatten().and_then(|v| self.get(v))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strip_ones(shape: &[usize]) -> &[usize] {
    let lead = shape.iter().take_while(|&&d| d == 1).count();
    &shape[lead..]
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn broadcast_offsets(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    let in_strides = contiguous_strides(input);
    let mut strides = vec![0; rank];
    for d in 0..input.len() {
        if input[d] != 1 {
            strides[d + pad] = in_strides[d];
        }
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn classify(a: &[usize], b: &[usize], out: &[usize]) -> Bcast {
    if a == b {
        return Bcast::Same;
    }
    let (sa, sb) = (strip_ones(a), strip_ones(b));
    if a == out && out.ends_with(sb) {
        return Bcast::RightSuffix(numel(sb));
    }
    if b == out && out.ends_with(sa) {
        return Bcast::LeftSuffix(numel(sa));
    }
    Bcast::General {
        ao: broadcast_offsets(out, a),
        bo: broadcast_offsets(out, b),
    }
}

#[inline]
fn for_each_pair(bc: &Bcast, total: usize, mut f: impl FnMut(usize, usize, usize)) {
    match bc {
        Bcast::Same => (0..total).for_each(|i| f(i, i, i)),
        Bcast::RightSuffix(n) => (0..total).for_each(|i| f(i, i, i % n)),
        Bcast::LeftSuffix(n) => (0..total).for_each(|i| f(i, i % n, i)),
        Bcast::General { ao, bo } => (0..total).for_each(|i| f(i, ao[i], bo[i])),
    }
}

fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let one = T::one();
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: Option<&'p ParamStore<T>>, train: bool, seed: u64) -> Self {
        let n = params.map_or(0, ParamStore::len);
        Tape {
            nodes: Vec::new(),
            params,
            param_nodes: vec![None; n],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A tape with no parameter store, for standalone computations.
    pub fn detached() -> Self {
        Tape::new(None, false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].storage {
            Storage::Owned(d) => d,
            Storage::Param(i) => &self.params.expect("param store").get(*i).data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        let val = self.value(v);
        if val.len() != 1 {
            return Err(Error::arg(format!("expected a scalar, got shape {:?}", self.shape(v))));
        }
        Ok(val[0])
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(data),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_len(shape: &[usize], len: usize) -> Result<()> {
        if numel(shape) != len {
            return Err(Error::arg(format!(
                "shape {shape:?} holds {} values, got {len}",
                numel(shape)
            )));
        }
        Ok(())
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        Self::check_len(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Free leaf that receives a gradient (used by oracles and tests).
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        Self::check_len(shape, data.len())?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn param(&mut self, idx: usize) -> Result<Var> {
        let store = self.params.ok_or_else(|| Error::arg("tape has no parameter store"))?;
        if idx >= store.len() {
            return Err(Error::arg(format!("parameter index {idx} out of range")));
        }
        if let Some(v) = self.param_nodes[idx] {
            return Ok(v);
        }
        self.nodes.push(Node {
            shape: store.get(idx).shape.clone(),
            storage: Storage::Param(idx),
            op: Op::Leaf,
            grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(v);
        Ok(v)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .ok_or_else(|| Error::arg("tape has no parameter store"))?
            .index_of(name)?;
        self.param(idx)
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched `a · b` over the last two axes; a 2-D `b` is shared by every
    /// batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty() && !batch_a.is_empty();
        if !b_shared && batch_a != batch_b {
            return Err(err());
        }
        let batch = numel(batch_a);
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
            if b_shared && !ta {
                // one tall gemm over all batch rows
                unsafe {
                    T::gemm(
                        batch * m,
                        k,
                        n,
                        av.as_ptr(),
                        rsa,
                        csa,
                        bv.as_ptr(),
                        rsb,
                        csb,
                        T::zero(),
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            } else {
                for bi in 0..batch {
                    let boff = if b_shared { 0 } else { bi * k * n };
                    unsafe {
                        T::gemm(
                            m,
                            k,
                            n,
                            av.as_ptr().add(bi * m * k),
                            rsa,
                            csa,
                            bv.as_ptr().add(boff),
                            rsb,
                            csb,
                            T::zero(),
                            out.as_mut_ptr().add(bi * m * n),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
        let grad = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            grad,
        ))
    }

    /// Per-edge relation-specific linear map: row `e` of `x` is multiplied by
    /// `w[rel[e]]`, with `w` shaped `[R, din, dout]`.
    pub fn relation_matmul(&mut self, x: Var, w: Var, rel: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] || sx[0] != rel.len() {
            return Err(Error::Shape {
                op: "relation_matmul",
                lhs: sx,
                rhs: sw,
            });
        }
        let (nrel, din, dout) = (sw[0], sw[1], sw[2]);
        if let Some(&bad) = rel.iter().find(|&&r| r >= nrel) {
            return Err(Error::arg(format!(
                "relation id {bad} out of range for {nrel} relation transforms"
            )));
        }
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nrel];
        for (e, &r) in rel.iter().enumerate() {
            buckets[r].push(e);
        }
        let groups: Vec<(usize, Vec<usize>)> = buckets.into_iter().enumerate().filter(|(_, g)| !g.is_empty()).collect();
        let mut out = vec![T::zero(); rel.len() * dout];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let mut xin = Vec::new();
            let mut yout = Vec::new();
            for (r, edges) in &groups {
                xin.clear();
                for &e in edges {
                    xin.extend_from_slice(&xv[e * din..(e + 1) * din]);
                }
                yout.clear();
                yout.resize(edges.len() * dout, T::zero());
                unsafe {
                    T::gemm(
                        edges.len(),
                        din,
                        dout,
                        xin.as_ptr(),
                        din as isize,
                        1,
                        wv.as_ptr().add(r * din * dout),
                        dout as isize,
                        1,
                        T::zero(),
                        yout.as_mut_ptr(),
                        dout as isize,
                        1,
                    );
                }
                for (i, &e) in edges.iter().enumerate() {
                    out[e * dout..(e + 1) * dout].copy_from_slice(&yout[i * dout..(i + 1) * dout]);
                }
            }
        }
        let grad = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(vec![rel.len(), dout], out, Op::RelMatMul { x, w, groups }, grad))
    }

    // ---- element-wise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>, Bcast)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let bc = classify(&sa, &sb, &out_shape);
        let total = numel(&out_shape);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); total];
        for_each_pair(&bc, total, |i, ia, ib| out[i] = f(av[ia], bv[ib]));
        Ok((out_shape, out, bc))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let grad = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::Add { a, b, bc }, grad))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let grad = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::Sub { a, b, bc }, grad))
    }

    /// Broadcasting element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let grad = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::Mul { a, b, bc }, grad))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let grad = self.requires_grad(a);
        Ok(self.push(shape, out, Op::Scale { a, c }, grad))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let grad = self.requires_grad(a);
        self.push(shape, out, op, grad)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, |x| x.max(T::zero()), Op::Relu { a }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, |x| gelu(x).0, Op::Gelu { a }))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let alpha = T::of(alpha);
        Ok(self.unary(
            a,
            |x| if x > T::zero() { x } else { alpha * x },
            Op::LeakyRelu { a, alpha },
        ))
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-p)` during
    /// training; identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::arg(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let len = self.value(a).len();
        let mask: Vec<T> = (0..len)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let grad = self.requires_grad(a);
        Ok(self.push(shape, out, Op::Dropout { a, mask }, grad))
    }

    // ---- structural -----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let grad = self.requires_grad(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, grad))
    }

    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if ax1 >= rank || ax2 >= rank {
            return Err(Error::arg(format!(
                "transpose axes ({ax1}, {ax2}) invalid for rank {rank}"
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(ax1, ax2);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::arg(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![T::zero(); numel(&shape)];
        permute_into(self.value(a), &shape, perm, &mut out, false);
        let grad = self.requires_grad(a);
        Ok(self.push(out_shape, out, Op::Permute { a, perm: perm.to_vec() }, grad))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::arg(format!(
                "concat axis {axis} invalid for rank {}",
                base.len()
            )));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let grad = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            grad,
        ))
    }

    /// Range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!(
                "slice axis {axis} invalid for rank {}",
                shape.len()
            )));
        }
        if start > end || end > shape[axis] {
            return Err(Error::arg(format!(
                "slice {start}..{end} out of bounds for axis of length {}",
                shape[axis]
            )));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let len = (end - start) * inner;
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let grad = self.requires_grad(a);
        Ok(self.push(out_shape, out, Op::Slice { a, axis, start }, grad))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::arg(format!("axis {axis} invalid for rank {}", shape.len())));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let scale = if mean {
            T::one() / T::of(dim.max(1) as f64)
        } else {
            T::one()
        };
        let src = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let grad = self.requires_grad(a);
        Ok(self.push(out_shape, out, Op::SumAxis { a, axis, scale }, grad))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Sum of every element, as a scalar of shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = numel(self.shape(a));
        let flat = self.reshape(a, &[n])?;
        let s = self.sum_axis(flat, 0)?;
        self.reshape(s, &[1])
    }

    // ---- normalization & attention helpers ------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::arg("softmax of a rank-0 tensor"))?;
        let mut out = self.value(a).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                softmax_row(row);
            }
        }
        let grad = self.requires_grad(a);
        Ok(self.push(shape, out, Op::Softmax { a }, grad))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::arg("log_softmax of a rank-0 tensor"))?;
        let mut out = self.value(a).to_vec();
        if d > 0 {
            for row in out.chunks_mut(d) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|x| *x = *x - lse);
            }
        }
        let grad = self.requires_grad(a);
        Ok(self.push(shape, out, Op::LogSoftmax { a }, grad))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis (no learned gain).
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::arg("rms_norm of a rank-0 tensor"))?;
        let eps = T::of(eps);
        let src = self.value(a);
        let rows = src.len() / d.max(1);
        let mut inv = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d.max(1)) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() / T::of(d as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().map(|&x| x * r));
        }
        let grad = self.requires_grad(a);
        Ok(self.push(shape, out, Op::RmsNorm { a, inv }, grad))
    }

    /// Softmax over groups of rows sharing a segment id, independently per
    /// column. `a` is `[E, H]`; `seg[e] < nseg`.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || shape[0] != seg.len() {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: shape,
                rhs: vec![seg.len()],
            });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= nseg) {
            return Err(Error::arg(format!("segment id {bad} >= {nseg}")));
        }
        let h = shape[1];
        let src = self.value(a);
        let mut maxes = vec![T::neg_infinity(); nseg * h];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..h {
                let m = &mut maxes[s * h + j];
                *m = m.max(src[e * h + j]);
            }
        }
        let mut out = vec![T::zero(); src.len()];
        let mut sums = vec![T::zero(); nseg * h];
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..h {
                let v = (src[e * h + j] - maxes[s * h + j]).exp();
                out[e * h + j] = v;
                sums[s * h + j] += v;
            }
        }
        for (e, &s) in seg.iter().enumerate() {
            for j in 0..h {
                out[e * h + j] = out[e * h + j] / sums[s * h + j];
            }
        }
        let grad = self.requires_grad(a);
        Ok(self.push(
            shape,
            out,
            Op::SegmentSoftmax {
                a,
                seg: seg.to_vec(),
                nseg,
            },
            grad,
        ))
    }

    // ---- indexing -------------------------------------------------------

    /// Row gather: output row `i` is row `idx[i]` of `table` (first axis).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let rows = *shape.first().ok_or_else(|| Error::arg("gather from a rank-0 tensor"))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::arg(format!("row index {bad} out of range for {rows} rows")));
        }
        let width = numel(&shape[1..]);
        let src = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let grad = self.requires_grad(table);
        Ok(self.push(
            out_shape,
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            grad,
        ))
    }

    /// Embedding lookup; alias of [`Tape::gather_rows`].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Output row `idx[i]` accumulates row `i` of `src`; `rows` output rows.
    pub fn scatter_add_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if shape.is_empty() || shape[0] != idx.len() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::arg(format!("row index {bad} out of range for {rows} rows")));
        }
        let width = numel(&shape[1..]);
        let sv = self.value(src);
        let mut out = vec![T::zero(); rows * width];
        for (i, &r) in idx.iter().enumerate() {
            for (o, &x) in out[r * width..(r + 1) * width]
                .iter_mut()
                .zip(&sv[i * width..(i + 1) * width])
            {
                *o += x;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let grad = self.requires_grad(src);
        Ok(self.push(out_shape, out, Op::ScatterAddRows { src, idx: idx.to_vec() }, grad))
    }

    // ---- loss -----------------------------------------------------------

    /// Mean token cross-entropy of `logits` `[n, V]` against `targets`,
    /// skipping rows whose target equals `ignore`. Returns shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t >= v) {
            return Err(Error::arg(format!("target id {bad} out of range for {v} classes")));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            count += 1;
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = if count > 0 {
            total / T::of(count as f64)
        } else {
            T::zero()
        };
        let grad = self.requires_grad(logits) && count > 0;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            grad,
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate over
    /// every use of a value.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads {
            grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].grad {
            return None;
        }
        let n = numel(&self.nodes[v.0].shape);
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(id));
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                if let Some(ga) = self.acc(grads, a) {
                    let bv = self.value(b);
                    // d op(A) = dC · op(B)ᵀ, written through A's layout
                    let (rsc, csc) = if ta { (1, m as isize) } else { (k as isize, 1) };
                    for bi in 0..batch {
                        let boff = if b_shared { 0 } else { bi * k * n };
                        unsafe {
                            T::gemm(
                                m,
                                n,
                                k,
                                g.as_ptr().add(bi * m * n),
                                n as isize,
                                1,
                                bv.as_ptr().add(boff),
                                csb,
                                rsb,
                                T::one(),
                                ga.as_mut_ptr().add(bi * m * k),
                                rsc,
                                csc,
                            );
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    let av = self.value(a);
                    let (rsc, csc) = if tb { (1, k as isize) } else { (n as isize, 1) };
                    if b_shared && !ta {
                        unsafe {
                            T::gemm(
                                k,
                                batch * m,
                                n,
                                av.as_ptr(),
                                csa,
                                rsa,
                                g.as_ptr(),
                                n as isize,
                                1,
                                T::one(),
                                gb.as_mut_ptr(),
                                rsc,
                                csc,
                            );
                        }
                    } else {
                        for bi in 0..batch {
                            let boff = if b_shared { 0 } else { bi * k * n };
                            unsafe {
                                T::gemm(
                                    k,
                                    m,
                                    n,
                                    av.as_ptr().add(bi * m * k),
                                    csa,
                                    rsa,
                                    g.as_ptr().add(bi * m * n),
                                    n as isize,
                                    1,
                                    T::one(),
                                    gb.as_mut_ptr().add(boff),
                                    rsc,
                                    csc,
                                );
                            }
                        }
                    }
                }
            }
            Op::RelMatMul { x, w, groups } => {
                let sw = &self.nodes[w.0].shape;
                let (din, dout) = (sw[1], sw[2]);
                let mut gin = Vec::new();
                let mut tmp = Vec::new();
                if let Some(gx) = self.acc(grads, *x) {
                    let wv = self.value(*w);
                    for (r, edges) in groups {
                        gin.clear();
                        for &e in edges {
                            gin.extend_from_slice(&g[e * dout..(e + 1) * dout]);
                        }
                        tmp.clear();
                        tmp.resize(edges.len() * din, T::zero());
                        unsafe {
                            T::gemm(
                                edges.len(),
                                dout,
                                din,
                                gin.as_ptr(),
                                dout as isize,
                                1,
                                wv.as_ptr().add(r * din * dout),
                                1,
                                dout as isize,
                                T::zero(),
                                tmp.as_mut_ptr(),
                                din as isize,
                                1,
                            );
                        }
                        for (i, &e) in edges.iter().enumerate() {
                            for (o, &v) in gx[e * din..(e + 1) * din].iter_mut().zip(&tmp[i * din..(i + 1) * din]) {
                                *o += v;
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    let xv = self.value(*x);
                    for (r, edges) in groups {
                        gin.clear();
                        tmp.clear();
                        for &e in edges {
                            gin.extend_from_slice(&g[e * dout..(e + 1) * dout]);
                            tmp.extend_from_slice(&xv[e * din..(e + 1) * din]);
                        }
                        unsafe {
                            T::gemm(
                                din,
                                edges.len(),
                                dout,
                                tmp.as_ptr(),
                                1,
                                din as isize,
                                gin.as_ptr(),
                                dout as isize,
                                1,
                                T::one(),
                                gw.as_mut_ptr().add(r * din * dout),
                                dout as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let neg = matches!(self.nodes[id].op, Op::Sub { .. });
                if let Some(ga) = self.acc(grads, *a) {
                    for_each_pair(bc, g.len(), |i, ia, _| ga[ia] += g[i]);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if neg {
                        for_each_pair(bc, g.len(), |i, _, ib| gb[ib] = gb[ib] - g[i]);
                    } else {
                        for_each_pair(bc, g.len(), |i, _, ib| gb[ib] += g[i]);
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b);
                    for_each_pair(bc, g.len(), |i, ia, ib| ga[ia] += g[i] * bv[ib]);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a);
                    for_each_pair(bc, g.len(), |i, ia, ib| gb[ib] += g[i] * av[ia]);
                }
            }
            &Op::Scale { a, c } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x * c);
                }
            }
            Op::Concat { parts, axis } => {
                let shape = &self.nodes[id].shape;
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].shape[*axis] * inner;
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + len];
                            gp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, dim, inner) = axis_split(&in_shape, axis);
                let len = self.nodes[id].shape[axis] * inner;
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        ga[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Permute { a, perm } => {
                let in_shape = self.nodes[a.0].shape.clone();
                if let Some(ga) = self.acc(grads, *a) {
                    permute_into(g, &in_shape, perm, ga, true);
                }
            }
            &Op::Reshape { a } => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
            }
            &Op::SumAxis { a, axis, scale } => {
                let in_shape = self.nodes[a.0].shape.clone();
                let (outer, dim, inner) = axis_split(&in_shape, axis);
                if let Some(ga) = self.acc(grads, a) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            ga[(o * dim + d) * inner..(o * dim + d + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &s)| *x += s * scale);
                        }
                    }
                }
            }
            &Op::Softmax { a } => {
                let d = *self.nodes[id].shape.last().unwrap_or(&1);
                if let Some(ga) = self.acc(grads, a) {
                    for ((gi, yi), go) in ga.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d)) {
                        let dot: T = yi.iter().zip(go).map(|(&y, &gg)| y * gg).sum();
                        for j in 0..d {
                            gi[j] += yi[j] * (go[j] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let d = *self.nodes[id].shape.last().unwrap_or(&1);
                if let Some(ga) = self.acc(grads, a) {
                    for ((gi, yi), go) in ga.chunks_mut(d).zip(out.chunks(d)).zip(g.chunks(d)) {
                        let s: T = go.iter().copied().sum();
                        for j in 0..d {
                            gi[j] += go[j] - yi[j].exp() * s;
                        }
                    }
                }
            }
            Op::RmsNorm { a, inv } => {
                let d = *self.nodes[id].shape.last().unwrap_or(&1);
                let nd = T::of(d as f64);
                let xv = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &ir) in inv.iter().enumerate() {
                        let x = &xv[r * d..(r + 1) * d];
                        let go = &g[r * d..(r + 1) * d];
                        let dot: T = x.iter().zip(go).map(|(&xx, &gg)| xx * gg).sum();
                        let c = ir * ir * ir * dot / nd;
                        for j in 0..d {
                            ga[r * d + j] += ir * go[j] - c * x[j];
                        }
                    }
                }
            }
            &Op::Relu { a } => {
                let xv = self.value(a);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            &Op::Gelu { a } => {
                let xv = self.value(a);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu(xv[i]).1;
                    }
                }
            }
            &Op::LeakyRelu { a, alpha } => {
                let xv = self.value(a);
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += if xv[i] > T::zero() { g[i] } else { alpha * g[i] };
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let width = numel(&self.nodes[table.0].shape[1..]);
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &r) in idx.iter().enumerate() {
                        gt[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[i * width..(i + 1) * width])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::ScatterAddRows { src, idx } => {
                let width = numel(&self.nodes[src.0].shape[1..]);
                if let Some(gs) = self.acc(grads, *src) {
                    for (i, &r) in idx.iter().enumerate() {
                        gs[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let scale = g[0] / T::of(*count as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::SegmentSoftmax { a, seg, nseg } => {
                let h = self.nodes[id].shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    let mut dots = vec![T::zero(); nseg * h];
                    for (e, &s) in seg.iter().enumerate() {
                        for j in 0..h {
                            dots[s * h + j] += g[e * h + j] * out[e * h + j];
                        }
                    }
                    for (e, &s) in seg.iter().enumerate() {
                        for j in 0..h {
                            ga[e * h + j] += out[e * h + j] * (g[e * h + j] - dots[s * h + j]);
                        }
                    }
                }
            }
        }
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

/// Copies `src` (laid out as `shape`) into permuted layout, or with
/// `reverse` accumulates a permuted-layout buffer back into `shape` layout.
fn permute_into<T: Real>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T], reverse: bool) {
    let rank = shape.len();
    if rank == 0 {
        if reverse {
            dst[0] += src[0];
        } else {
            dst[0] = src[0];
        }
        return;
    }
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    // innermost run is contiguous in both layouts when the last axis stays put
    let run = if perm[rank - 1] == rank - 1 {
        out_shape[rank - 1]
    } else {
        1
    };
    let outer_rank = if run > 1 { rank - 1 } else { rank };
    let total = numel(&out_shape);
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    let mut pos = 0usize;
    while pos < total {
        if reverse {
            for j in 0..run {
                dst[off + j] += src[pos + j];
            }
        } else {
            dst[pos..pos + run].copy_from_slice(&src[off..off + run]);
        }
        pos += run;
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}
