mod common;

use common::{check_model, check_op, op_cases, rel_error, toy_batch, toy_config, toy_vocab, OpCase};
use gas2s::model::{Gas2s, Mode};
use gas2s::synth::toy_kg;
use gas2s::tensor::{Real, Tape, Var};

#[test]
fn every_op_matches_finite_differences_in_f64() {
    for case in op_cases::<f64>(3) {
        let err = check_op(&case, 1e-6);
        assert!(err < 1e-6, "{}: relative error {err:e}", case.name);
    }
}

/// Input gradients of `sum(w ⊙ op(x))` for fixed pseudo-random `w`.
fn weighted_grads<T: Real>(case: &OpCase<T>) -> Vec<f64> {
    let mut t: Tape<'_, T> = Tape::new(None, true, 17);
    let vs: Vec<Var> = case.inputs.iter().map(|(v, s)| t.leaf(v.clone(), s).unwrap()).collect();
    let out = (case.build)(&mut t, &vs).unwrap();
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<T> = (0..n).map(|i| T::of(((i * 7919) % 13) as f64 / 6.0 - 1.0)).collect();
    let w = t.constant(w, &shape).unwrap();
    let prod = t.mul(out, w).unwrap();
    let loss = t.sum_all(prod).unwrap();
    let g = t.backward(loss).unwrap();
    vs.iter()
        .zip(&case.inputs)
        .flat_map(|(v, (x, _))| match g.get(*v) {
            Some(g) => g.iter().map(|x| x.to_f64().unwrap()).collect(),
            None => vec![0.0; x.len()],
        })
        .collect()
}

/// f32 gradients against the f64 ones on identical inputs.
#[test]
fn f32_gradients_track_f64() {
    for (h, l) in op_cases::<f64>(4).iter().zip(&op_cases::<f32>(4)) {
        let a = weighted_grads(h);
        let b = weighted_grads(l);
        assert_eq!(a.len(), b.len(), "{}", h.name);
        let err = rel_error(&b, &a);
        assert!(err < 1e-4, "{}: f32 vs f64 relative error {err:e}", h.name);
    }
}

#[test]
fn plain_and_flat_models_match_finite_differences() {
    let g = toy_kg(2).unwrap();
    let vocab = toy_vocab(&g);
    for mode in [Mode::Plain, Mode::FlatContext] {
        let mut cfg = toy_config(vocab.size(), g.num_relations());
        cfg.mode = mode;
        let mut model = Gas2s::<f64>::new(cfg, 5).unwrap();
        let (inputs, targets) = toy_batch(&g, &vocab, mode, 3);
        let err = check_model(&mut model, &inputs, &targets, 20, 1e-5, 8);
        assert!(err < 1e-3, "{mode}: relative error {err:e}");
    }
}
