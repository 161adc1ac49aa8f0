#![allow(dead_code)]

use gas2s::features::{Featurizer, LinkQuery};
use gas2s::kg::{KnowledgeGraph, Split};
use gas2s::model::{Gas2s, Mode, ModelConfig, QueryInput};
use gas2s::sampler::SubgraphSpec;
use gas2s::tensor::{Real, Tape, Var};
use gas2s::verbalize::{mention_corpus, train_tokenizer, SegmentCache, TokenizedSeq, Vocabulary};
use gas2s::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build<T> = dyn Fn(&mut Tape<'_, T>, &[Var]) -> Result<Var>;

/// One op under test: input shapes, input values and the forward builder.
pub struct OpCase<T: Real> {
    pub name: &'static str,
    pub inputs: Vec<(Vec<T>, Vec<usize>)>,
    pub build: Box<Build<T>>,
}

pub fn randn<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.2..1.0);
            T::of(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect()
}

fn input<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    (randn(rng, shape.iter().product()), shape.to_vec())
}

fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap()
}

/// ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂), or 0 when both vanish.
pub fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds the op on fresh leaves and reduces it with fixed random weights to
/// a scalar, so every output element contributes.
fn scalar_loss<T: Real>(
    case: &OpCase<T>,
    values: &[Vec<T>],
    weights: &mut Option<Vec<T>>,
    seed: u64,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape: Tape<'_, T> = Tape::new(None, true, seed);
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .zip(values)
        .map(|((_, shape), v)| tape.leaf(v.clone(), shape).unwrap())
        .collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        randn(&mut rng, n)
    });
    let wv = tape.constant(w.clone(), &shape).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let value = to_f64(tape.value(loss)[0]);
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(values)
        .map(|(v, x)| {
            grads
                .get(*v)
                .map(|g| g.iter().copied().map(to_f64).collect())
                .unwrap_or_else(|| vec![0.0; x.len()])
        })
        .collect();
    (value, g)
}

/// Central-difference relative error of every input gradient of `case`.
pub fn check_op<T: Real>(case: &OpCase<T>, h: f64) -> f64 {
    let seed = 17;
    let values: Vec<Vec<T>> = case.inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut weights = None;
    let (_, analytic) = scalar_loss(case, &values, &mut weights, seed);
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (i, v) in values.iter().enumerate() {
        for j in 0..v.len() {
            let mut plus = values.clone();
            plus[i][j] = T::of(to_f64(v[j]) + h);
            let mut minus = values.clone();
            minus[i][j] = T::of(to_f64(v[j]) - h);
            let (lp, _) = scalar_loss(case, &plus, &mut weights, seed);
            let (lm, _) = scalar_loss(case, &minus, &mut weights, seed);
            n.push((lp - lm) / (2.0 * h));
            a.push(analytic[i][j]);
        }
    }
    rel_error(&a, &n)
}

/// Every differentiable tape op, on small random inputs.
pub fn op_cases<T: Real>(seed: u64) -> Vec<OpCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases: Vec<OpCase<T>> = Vec::new();
    let mut push = |name, inputs, build: Box<Build<T>>| cases.push(OpCase { name, inputs, build });

    push(
        "matmul",
        vec![input(r, &[2, 3, 4]), input(r, &[2, 4, 5])],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    );
    push(
        "matmul_shared",
        vec![input(r, &[2, 3, 4]), input(r, &[4, 2])],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    );
    push(
        "matmul_nt",
        vec![input(r, &[2, 3, 4]), input(r, &[2, 5, 4])],
        Box::new(|t, v| t.matmul_nt(v[0], v[1])),
    );
    push(
        "relation_matmul",
        vec![input(r, &[5, 3]), input(r, &[3, 3, 2])],
        Box::new(|t, v| t.relation_matmul(v[0], v[1], &[0, 2, 2, 1, 0])),
    );
    push(
        "add_broadcast",
        vec![input(r, &[2, 3, 4]), input(r, &[4])],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    push(
        "sub",
        vec![input(r, &[3, 4]), input(r, &[3, 4])],
        Box::new(|t, v| t.sub(v[0], v[1])),
    );
    push(
        "mul_broadcast",
        vec![input(r, &[3, 4]), input(r, &[3, 1])],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    push("scale", vec![input(r, &[3, 4])], Box::new(|t, v| t.scale(v[0], -0.7)));
    let x = (away_from_zero(r, 12), vec![3, 4]);
    push("relu", vec![x.clone()], Box::new(|t, v| t.relu(v[0])));
    push("leaky_relu", vec![x], Box::new(|t, v| t.leaky_relu(v[0], 0.2)));
    push("gelu", vec![input(r, &[3, 4])], Box::new(|t, v| t.gelu(v[0])));
    push(
        "dropout",
        vec![input(r, &[4, 5])],
        Box::new(|t, v| t.dropout(v[0], 0.3)),
    );
    push(
        "reshape",
        vec![input(r, &[2, 6])],
        Box::new(|t, v| t.reshape(v[0], &[3, 4])),
    );
    push(
        "transpose",
        vec![input(r, &[2, 3, 4])],
        Box::new(|t, v| t.transpose(v[0], 0, 2)),
    );
    push(
        "permute",
        vec![input(r, &[2, 3, 4])],
        Box::new(|t, v| t.permute(v[0], &[1, 2, 0])),
    );
    push(
        "concat",
        vec![input(r, &[2, 3]), input(r, &[2, 2])],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
    );
    push(
        "slice",
        vec![input(r, &[3, 5])],
        Box::new(|t, v| t.slice(v[0], 1, 1, 4)),
    );
    push(
        "sum_axis",
        vec![input(r, &[2, 3, 4])],
        Box::new(|t, v| t.sum_axis(v[0], 1)),
    );
    push(
        "mean_axis",
        vec![input(r, &[2, 3, 4])],
        Box::new(|t, v| t.mean_axis(v[0], 2)),
    );
    push("sum_all", vec![input(r, &[3, 4])], Box::new(|t, v| t.sum_all(v[0])));
    push("softmax", vec![input(r, &[3, 5])], Box::new(|t, v| t.softmax(v[0])));
    push(
        "log_softmax",
        vec![input(r, &[3, 5])],
        Box::new(|t, v| t.log_softmax(v[0])),
    );
    push(
        "rms_norm",
        vec![input(r, &[3, 5])],
        Box::new(|t, v| t.rms_norm(v[0], 1e-6)),
    );
    push(
        "segment_softmax",
        vec![input(r, &[6, 2])],
        Box::new(|t, v| t.segment_softmax(v[0], &[0, 1, 0, 2, 1, 0], 3)),
    );
    push(
        "gather_rows",
        vec![input(r, &[4, 3])],
        Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
    );
    push(
        "embedding",
        vec![input(r, &[5, 2])],
        Box::new(|t, v| t.embedding(v[0], &[4, 4, 2])),
    );
    push(
        "scatter_add_rows",
        vec![input(r, &[5, 3])],
        Box::new(|t, v| t.scatter_add_rows(v[0], &[0, 2, 0, 1, 2], 4)),
    );
    push(
        "cross_entropy",
        vec![input(r, &[4, 6])],
        Box::new(|t, v| t.cross_entropy(v[0], &[1, 0, 5, 3], 0)),
    );
    cases
}

/// Small graph-augmented config for end-to-end checks.
pub fn toy_config(vocab_size: usize, num_relations: usize) -> ModelConfig {
    let mut c = ModelConfig::tiny(vocab_size, num_relations);
    c.d_model = 32;
    c.d_ff = 64;
    c.attn_heads = 4;
    c.rgat_heads = 2;
    c
}

pub fn toy_vocab(g: &KnowledgeGraph) -> Vocabulary {
    let corpus = mention_corpus(g.mentions());
    train_tokenizer(corpus.iter().map(String::as_str), 300).unwrap()
}

/// Featurized training batch of `n` train queries.
pub fn toy_batch(g: &KnowledgeGraph, vocab: &Vocabulary, mode: Mode, n: usize) -> (Vec<QueryInput>, Vec<TokenizedSeq>) {
    let spec = SubgraphSpec::new(vec![3, 2], 64).unwrap();
    let f = Featurizer {
        graph: g,
        vocab,
        mode,
        spec: &spec,
        max_len: 64,
    };
    let mut cache = SegmentCache::default();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (i, t) in g.triples(Split::Train).iter().take(n).enumerate() {
        let q = LinkQuery::pair(t)[i % 2];
        inputs.push(f.input(&q, Some(t), i as u64, &mut cache).unwrap());
        targets.push(f.target(&q, &mut cache));
    }
    (inputs, targets)
}

/// Compares the model-loss gradient with central differences on `samples`
/// randomly chosen scalars (among those the loss depends on) and returns
/// the relative error over them.
pub fn check_model<T: Real>(
    model: &mut Gas2s<T>,
    inputs: &[QueryInput],
    targets: &[TokenizedSeq],
    samples: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let ins: Vec<&QueryInput> = inputs.iter().collect();
    let tgs: Vec<&TokenizedSeq> = targets.iter().collect();
    let loss_of = |m: &Gas2s<T>| -> (f64, Vec<Option<Vec<f64>>>) {
        let mut tape = m.tape(false, 0);
        let l = m.loss(&mut tape, &ins, &tgs).unwrap();
        let value = to_f64(tape.value(l)[0]);
        let g = tape.backward(l).unwrap();
        let grads = (0..m.params().len())
            .map(|i| g.param(i).map(|g| g.iter().copied().map(to_f64).collect()))
            .collect();
        (value, grads)
    };
    let (_, grads) = loss_of(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let live: Vec<usize> = (0..grads.len())
        .filter(|&i| grads[i].as_ref().is_some_and(|g| g.iter().any(|x| x.abs() > 1e-9)))
        .collect();
    let mut a = Vec::new();
    let mut n = Vec::new();
    for _ in 0..samples {
        let p = live[rng.gen_range(0..live.len())];
        let g = grads[p].as_ref().unwrap();
        let nz: Vec<usize> = (0..g.len()).filter(|&j| g[j].abs() > 1e-9).collect();
        let j = nz[rng.gen_range(0..nz.len())];
        let orig = model.params().get(p).data[j];
        model.params_mut().get_mut(p).data[j] = T::of(to_f64(orig) + h);
        let lp = {
            let mut tape = model.tape(false, 0);
            let l = model.loss(&mut tape, &ins, &tgs).unwrap();
            to_f64(tape.value(l)[0])
        };
        model.params_mut().get_mut(p).data[j] = T::of(to_f64(orig) - h);
        let lm = {
            let mut tape = model.tape(false, 0);
            let l = model.loss(&mut tape, &ins, &tgs).unwrap();
            to_f64(tape.value(l)[0])
        };
        model.params_mut().get_mut(p).data[j] = orig;
        n.push((lp - lm) / (2.0 * h));
        a.push(g[j]);
    }
    rel_error(&a, &n)
}
