use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

/// Central finite differences of a scalar function.
fn finite_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

struct ProbeParams {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    gamma: Tensor,
    table: Tensor,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

impl ProbeParams {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: random_tensor(rng, 4, 6),
            b1: random_tensor(rng, 1, 6),
            w2: random_tensor(rng, 6, 4),
            gamma: random_tensor(rng, 1, 4),
            table: random_tensor(rng, 5, 4),
        }
    }
}

/// A small network exercising every op kind. `x` is `3 x 4`.
fn probe<'a>(tape: &mut Tape<'a>, p: &'a ProbeParams, x: NodeId) -> NodeId {
    let w1 = tape.param(&p.w1);
    let b1 = tape.param(&p.b1);
    let w2 = tape.param(&p.w2);
    let gamma = tape.param(&p.gamma);
    let table = tape.param(&p.table);

    let emb = tape.embedding_lookup(table, vec![1, 3, 1]).unwrap();
    let xe = tape.add(x, emb).unwrap();
    let h = tape.matmul(xe, w1).unwrap();
    let h = tape.add(h, b1).unwrap();
    let h = tape.relu(h).unwrap();
    let h = tape.matmul(h, w2).unwrap();
    let h = tape.tanh(h).unwrap();
    let ht = tape.transpose(h).unwrap();
    let scores = tape.matmul(xe, ht).unwrap();
    let scores = tape.affine(scores, 0.5, 0.0).unwrap();
    let attn = tape.softmax(scores, SoftmaxRole::Attention).unwrap();
    let mixed = tape.matmul(attn, h).unwrap();
    let normed = tape.layer_norm(mixed).unwrap();
    let normed = tape.mul(normed, gamma).unwrap();
    let gate = tape.sigmoid(xe).unwrap();
    let gated = tape.mul(gate, normed).unwrap();
    let e = tape.affine(gated, 0.3, 0.0).unwrap();
    let e = tape.exp(e).unwrap();
    let left = tape.slice(e, Axis::Cols, 0, 2).unwrap();
    let right = tape.slice(e, Axis::Rows, 1, 2).unwrap();
    let right = tape.slice(right, Axis::Cols, 2, 2).unwrap();
    let left = tape.mean(left, Some(Axis::Rows)).unwrap();
    let right = tape.sum(right, Some(Axis::Rows)).unwrap();
    let both = tape.concat(&[left, right], Axis::Cols).unwrap();
    let pooled = tape.mean(both, Some(Axis::Cols)).unwrap();
    let logits = tape.concat(&[pooled, both], Axis::Cols).unwrap();
    let probs = tape.softmax(logits, SoftmaxRole::Output).unwrap();
    let out = tape.slice(probs, Axis::Cols, 1, 1).unwrap();
    tape.sum(out, None).unwrap()
}

fn eval_probe(p: &ProbeParams, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xi = tape.input(Tensor::matrix(3, 4, x.to_vec()).unwrap());
    let out = probe(&mut tape, p, xi);
    tape.value(out).item().unwrap()
}

fn min_relu_margin(tape: &Tape<'_>) -> f64 {
    (0..tape.len())
        .map(NodeId)
        .filter(|id| matches!(tape.op(*id), Op::Relu))
        .flat_map(|id| tape.value(tape.parents(id)[0]).data().to_vec())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

#[test]
fn linear_function_gradient() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::scalar(2.0));
    let y = tape.affine(x, 3.0, 0.0).unwrap();
    let g = tape.backward(y, &BackwardPolicy::standard()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[3.0]);
}

#[test]
fn relu_rescale_in_identity_region() {
    let build = |v: f64| {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(v));
        let y = tape.relu(x).unwrap();
        (tape, x, y)
    };
    let (ref_tape, _, _) = build(1.0);
    let reference = ReferenceActivations::capture(&ref_tape);
    let (tape, x, y) = build(4.0);
    let g = tape.backward(y, &BackwardPolicy::deeplift(&reference)).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0]);
}

#[test]
fn relu_rescale_across_the_kink() {
    let build = |v: f64| {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(v));
        let y = tape.relu(x).unwrap();
        (tape, x, y)
    };
    let (ref_tape, _, _) = build(-2.0);
    let reference = ReferenceActivations::capture(&ref_tape);
    let (tape, x, y) = build(2.0);
    let g = tape.backward(y, &BackwardPolicy::deeplift(&reference)).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.5]);
}

#[test]
fn probe_gradients_match_finite_differences() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 100 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ProbeParams::new(&mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();

        let mut tape = Tape::new();
        let xi = tape.input(Tensor::matrix(3, 4, x.clone()).unwrap());
        let out = probe(&mut tape, &params, xi);
        if min_relu_margin(&tape) < 1e-3 {
            continue;
        }
        let g = tape.backward(out, &BackwardPolicy::standard()).unwrap();
        let fd = finite_difference(&|v| eval_probe(&params, v), &x, 1e-4);
        for (a, b) in g.wrt(xi).unwrap().data().iter().zip(&fd) {
            assert!(rel_err(*a, *b) < 1e-4, "seed {seed}: autodiff {a} vs fd {b}");
        }
        checked += 1;
    }
}

#[test]
fn deeplift_sums_to_delta_on_probe() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ProbeParams::new(&mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x0: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();

        let mut ref_tape = Tape::new();
        let r = ref_tape.input(Tensor::matrix(3, 4, x0.clone()).unwrap());
        let ref_out = probe(&mut ref_tape, &params, r);
        let reference = ReferenceActivations::capture(&ref_tape);

        let mut tape = Tape::new();
        let xi = tape.input(Tensor::matrix(3, 4, x.clone()).unwrap());
        let out = probe(&mut tape, &params, xi);
        let m = tape.backward(out, &BackwardPolicy::deeplift(&reference)).unwrap();
        let total: f64 = m
            .wrt(xi)
            .unwrap()
            .data()
            .iter()
            .zip(x.iter().zip(&x0))
            .map(|(mult, (a, b))| mult * (a - b))
            .sum();
        let delta = tape.value(out).item().unwrap() - ref_tape.value(ref_out).item().unwrap();
        assert!((total - delta).abs() < 1e-10, "seed {seed}: {total} vs {delta}");
    }
}

#[test]
fn deeplift_with_identical_reference_gives_zero_attribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ProbeParams::new(&mut rng);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut ref_tape = Tape::new();
    let r = ref_tape.input(Tensor::matrix(3, 4, x.clone()).unwrap());
    probe(&mut ref_tape, &params, r);
    let reference = ReferenceActivations::capture(&ref_tape);
    assert!(!reference.nonlinear_nodes().is_empty());

    let mut tape = Tape::new();
    let xi = tape.input(Tensor::matrix(3, 4, x.clone()).unwrap());
    let out = probe(&mut tape, &params, xi);
    let m = tape.backward(out, &BackwardPolicy::deeplift(&reference)).unwrap();
    let mult = m.wrt(xi).unwrap();
    assert!(mult.is_finite());
    let delta = ref_tape.value(NodeId(ref_tape.len() - 1)).item().unwrap() - tape.value(out).item().unwrap();
    assert_eq!(delta, 0.0);
}

#[test]
fn gim_at_unit_temperature_is_standard_bit_for_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ProbeParams::new(&mut rng);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut tape = Tape::new();
    let xi = tape.input(Tensor::matrix(3, 4, x).unwrap());
    let out = probe(&mut tape, &params, xi);
    let standard = tape.backward(out, &BackwardPolicy::standard()).unwrap();
    let gim = tape.backward(out, &BackwardPolicy::gim(1.0)).unwrap();
    assert_eq!(standard.wrt(xi).unwrap(), gim.wrt(xi).unwrap());
    let gim2 = tape.backward(out, &BackwardPolicy::gim(2.0)).unwrap();
    assert_ne!(standard.wrt(xi).unwrap(), gim2.wrt(xi).unwrap());
}

#[test]
fn gim_softmax_uses_tempered_jacobian() {
    let logits = vec![1.0, -0.5, 2.0];
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row(logits.clone()));
    let s = tape.softmax(x, SoftmaxRole::Attention).unwrap();
    let pick = tape.slice(s, Axis::Cols, 2, 1).unwrap();
    let out = tape.sum(pick, None).unwrap();
    let g = tape.backward(out, &BackwardPolicy::gim(2.0)).unwrap();

    let z: Vec<f64> = logits.iter().map(|v| (v / 2.0).exp()).collect();
    let total: f64 = z.iter().sum();
    let st: Vec<f64> = z.iter().map(|v| v / total).collect();
    let expected: Vec<f64> = (0..3)
        .map(|j| st[2] * (if j == 2 { 1.0 } else { 0.0 } - st[j]))
        .collect();
    for (a, b) in g.wrt(x).unwrap().data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn gim_layer_norm_freezes_statistics() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row(vec![1.0, 2.0, 4.0]));
    let y = tape.layer_norm(x).unwrap();
    let pick = tape.slice(y, Axis::Cols, 0, 1).unwrap();
    let out = tape.sum(pick, None).unwrap();
    let g = tape.backward(out, &BackwardPolicy::gim(2.0)).unwrap();
    let mean = 7.0 / 3.0;
    let var = ((1.0 - mean) * (1.0f64 - mean) + (2.0 - mean) * (2.0 - mean) + (4.0 - mean) * (4.0 - mean)) / 3.0;
    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    assert_eq!(g.wrt(x).unwrap().data(), &[inv, 0.0, 0.0]);
}

#[test]
fn gim_gate_blocks_the_gate_operand() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::row(vec![2.0, 3.0]));
    let b = tape.input(Tensor::row(vec![5.0, 7.0]));
    let p = tape.mul_gated(a, b, Some(GateOperand::Lhs)).unwrap();
    let out = tape.sum(p, None).unwrap();
    let gim = tape.backward(out, &BackwardPolicy::gim(1.0)).unwrap();
    assert!(gim.wrt(a).is_none());
    assert_eq!(gim.wrt(b).unwrap().data(), &[2.0, 3.0]);
    let std = tape.backward(out, &BackwardPolicy::standard()).unwrap();
    assert_eq!(std.wrt(a).unwrap().data(), &[5.0, 7.0]);
}

#[test]
fn backward_errors() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::row(vec![1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    assert!(matches!(tape.backward(y, &BackwardPolicy::standard()), Err(Error::NonScalarOutput(_))));
    let s = tape.sum(y, None).unwrap();
    let mut policy = BackwardPolicy::standard();
    policy.mode = BackwardMode::DeepLiftRescale;
    assert!(matches!(tape.backward(s, &policy), Err(Error::MissingReference)));
    assert!(tape.backward(s, &BackwardPolicy::gim(0.0)).is_err());

    let mut other = Tape::new();
    let z = other.input(Tensor::row(vec![1.0, 2.0]));
    other.sigmoid(z).unwrap();
    let reference = ReferenceActivations::capture(&other);
    assert!(matches!(
        tape.backward(s, &BackwardPolicy::deeplift(&reference)),
        Err(Error::TapeMismatch { .. })
    ));
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ProbeParams::new(&mut rng);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let run = || {
        let mut tape = Tape::new();
        let xi = tape.input(Tensor::matrix(3, 4, x.clone()).unwrap());
        let out = probe(&mut tape, &params, xi);
        tape.backward(out, &BackwardPolicy::gim(2.0)).unwrap().wrt(xi).unwrap().clone()
    };
    assert_eq!(run(), run());
}
