mod common;

use chemtyper::synthetic::chemicals;
use chemtyper::tensor::{ParamStore, Tape, Tensor, Var};
use chemtyper::typer::{Ablation, TypingModel};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
    random_tensor(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

fn assert_ok(name: &str, r: GradReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.ok(), "{name}: {:?}", r.failures);
}

#[test]
fn matmul_variants() {
    assert_ok("mat x mat", check_op(&[rand_t(1, &[3, 4]), rand_t(2, &[4, 2])], |t, v| t.matmul(v[0], v[1]).unwrap()));
    assert_ok("vec x mat", check_op(&[rand_t(3, &[4]), rand_t(4, &[4, 3])], |t, v| t.matmul(v[0], v[1]).unwrap()));
}

#[test]
fn elementwise_and_broadcast() {
    let a = rand_t(5, &[3, 4]);
    let b = rand_t(6, &[3, 4]);
    let row = rand_t(7, &[4]);
    assert_ok("add", check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()));
    assert_ok("add row", check_op(&[a.clone(), row], |t, v| t.add(v[0], v[1]).unwrap()));
    assert_ok("mul", check_op(&[a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap()));
    assert_ok("scale", check_op(&[a.clone()], |t, v| t.scale(v[0], -2.5)));
    assert_ok("self mul", check_op(&[a], |t, v| t.mul(v[0], v[0]).unwrap()));
}

#[test]
fn nonlinearities() {
    let a = rand_t(8, &[2, 5]);
    assert_ok("tanh", check_op(&[a.clone()], |t, v| t.tanh(v[0])));
    assert_ok("sigmoid", check_op(&[a.clone()], |t, v| t.sigmoid(v[0])));
    assert_ok("gelu", check_op(&[a.clone()], |t, v| t.gelu(v[0])));
    assert_ok("softmax", check_op(&[a], |t, v| t.softmax_rows(v[0])));
}

#[test]
fn reductions_and_reshaping() {
    let a = rand_t(9, &[3, 4]);
    let b = rand_t(10, &[2, 4]);
    assert_ok("mean 0", check_op(&[a.clone()], |t, v| t.mean(v[0], 0).unwrap()));
    assert_ok("mean 1", check_op(&[a.clone()], |t, v| t.mean(v[0], 1).unwrap()));
    assert_ok("sum", check_op(&[a.clone()], |t, v| t.sum(v[0])));
    assert_ok("transpose", check_op(&[a.clone()], |t, v| t.transpose(v[0]).unwrap()));
    assert_ok("slice", check_op(&[a.clone()], |t, v| t.slice_cols(v[0], 1, 2).unwrap()));
    assert_ok("row", check_op(&[a.clone()], |t, v| t.row(v[0], 2).unwrap()));
    assert_ok("vstack", check_op(&[a.clone(), b], |t, v| t.vstack(&[v[0], v[1]]).unwrap()));
    assert_ok(
        "concat",
        check_op(&[a.clone(), rand_t(11, &[3, 2])], |t, v| t.concat(&[v[0], v[1]]).unwrap()),
    );
    assert_ok(
        "concat vectors",
        check_op(&[rand_t(12, &[3]), rand_t(13, &[2])], |t, v| t.concat(&[v[0], v[1]]).unwrap()),
    );
}

#[test]
fn layer_norm_and_embedding() {
    assert_ok(
        "layer norm",
        check_op(&[rand_t(14, &[3, 5]), rand_t(15, &[5]), rand_t(16, &[5])], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
    );
    assert_ok(
        "embedding",
        check_op(&[rand_t(17, &[6, 3])], |t, v| t.embedding(v[0], &[4, 1, 4, 0]).unwrap()),
    );
}

#[test]
fn soft_margin() {
    assert_ok(
        "soft margin",
        check_op(&[rand_t(18, &[4])], |t, v| t.soft_margin_loss(v[0], &[1.0, 0.0, 0.0, 1.0]).unwrap()),
    );
}

#[test]
fn attention_block_composition() {
    assert_ok(
        "attention",
        check_op(&[rand_t(19, &[3, 4]), rand_t(20, &[4, 4]), rand_t(21, &[4, 4])], |t, v| {
            let q = t.matmul(v[0], v[1]).unwrap();
            let k = t.matmul(v[0], v[2]).unwrap();
            let s = t.scale(t.matmul(q, t.transpose(k).unwrap()).unwrap(), 0.5);
            t.matmul(t.softmax_rows(s), v[0]).unwrap()
        }),
    );
}

#[test]
fn mlp_through_param_store() {
    let mut store = ParamStore::default();
    store.register("w1", rand_t(22, &[4, 6])).unwrap();
    store.register("b1", rand_t(23, &[6])).unwrap();
    store.register("w2", rand_t(24, &[6, 2])).unwrap();
    store.register("b2", rand_t(25, &[2])).unwrap();
    let x = rand_t(26, &[3, 4]);
    let forward = |tape: &Tape, s: &ParamStore| -> Var {
        let xv = tape.constant(x.clone());
        let h = tape.tanh(
            tape.add(tape.matmul(xv, tape.param(s, "w1").unwrap()).unwrap(), tape.param(s, "b1").unwrap())
                .unwrap(),
        );
        let y = tape.add(tape.matmul(h, tape.param(s, "w2").unwrap()).unwrap(), tape.param(s, "b2").unwrap()).unwrap();
        tape.sum(tape.mul(y, y).unwrap())
    };
    store.zero_grad();
    let tape = Tape::new();
    let l = forward(&tape, &store);
    tape.backward(l, &mut store).unwrap();
    let r = check_params(&mut store, |s| s, |s| {
        let tape = Tape::new();
        let l = forward(&tape, s);
        tape.item(l)
    });
    assert_ok("mlp", r);
}

#[test]
fn backward_is_linear() {
    let x = rand_t(27, &[2, 3]);
    let grad_of = |a: f64, b: f64| {
        let tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let f = tape.sum(tape.tanh(v));
        let g = tape.sum(tape.mul(v, v).unwrap());
        let combo = tape.add(tape.scale(f, a), tape.scale(g, b)).unwrap();
        tape.gradients(combo).unwrap().get(v).unwrap().to_vec()
    };
    let gf = grad_of(1.0, 0.0);
    let gg = grad_of(0.0, 1.0);
    let both = grad_of(2.0, -3.0);
    for i in 0..both.len() {
        assert!((both[i] - (2.0 * gf[i] - 3.0 * gg[i])).abs() < 1e-12);
    }
}

fn model(ab: Ablation, seed: u64) -> (TypingModel, Vec<chemtyper::typer::TrainingExample>) {
    let chems = chemicals(4, 21);
    let vocabs = synthetic_vocabs(&chems);
    let m = TypingModel::new(gradcheck_encoder(), ab.config(), 3, vocabs, seed).unwrap();
    let examples = vec![synthetic_example(&chems[0], true), synthetic_example(&chems[1], false)];
    (m, examples)
}

#[test]
fn every_ablation_matches_finite_differences() {
    for ab in [Ablation::NoGraph, Ablation::NoDescription, Ablation::NoCrossModal, Ablation::NoContextOnly] {
        let (mut m, ex) = model(ab, 4);
        let r = check_model(&mut m, &ex);
        assert_ok(ab.name(), r);
    }
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let run = || {
        let (mut m, ex) = model(Ablation::Full, 9);
        let prepared = m.prepare_all(&ex).unwrap();
        m.store_mut().zero_grad();
        let tape = Tape::new();
        let l = m.loss(&tape, &prepared[0]).unwrap();
        let value = tape.item(l);
        tape.backward(l, m.store_mut()).unwrap();
        let grads: Vec<Vec<f64>> = m
            .store()
            .names()
            .map(|n| m.store().get(n).unwrap().grad.clone().unwrap())
            .collect();
        (value.to_bits(), grads.iter().flatten().map(|g| g.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
