use attrbench::autodiff::{Axis, BackwardPolicy, NodeId, ReferenceActivations, SoftmaxRole, Tape, Tensor};
use proptest::prelude::*;

const ROWS: usize = 3;
const COLS: usize = 4;

#[derive(Clone, Copy, Debug)]
enum UnaryOp {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    AttentionSoftmax,
    OutputSoftmax,
    LayerNorm,
    Affine,
    Transpose,
    MatMulRight,
    AddRow,
    MulSelf,
    Concat,
    SliceRows,
    SliceCols,
    SumRows,
    SumCols,
    MeanRows,
    MeanCols,
    Lookup,
}

const OPS: [UnaryOp; 20] = [
    UnaryOp::Relu,
    UnaryOp::Sigmoid,
    UnaryOp::Tanh,
    UnaryOp::Exp,
    UnaryOp::AttentionSoftmax,
    UnaryOp::OutputSoftmax,
    UnaryOp::LayerNorm,
    UnaryOp::Affine,
    UnaryOp::Transpose,
    UnaryOp::MatMulRight,
    UnaryOp::AddRow,
    UnaryOp::MulSelf,
    UnaryOp::Concat,
    UnaryOp::SliceRows,
    UnaryOp::SliceCols,
    UnaryOp::SumRows,
    UnaryOp::SumCols,
    UnaryOp::MeanRows,
    UnaryOp::MeanCols,
    UnaryOp::Lookup,
];

/// `sum(r ⊙ op(x))` for a fixed projection `r`, so every output entry
/// reaches the scalar with its own weight.
fn build<'a>(tape: &mut Tape<'a>, op: UnaryOp, x: NodeId, aux: &'a Tensor, proj: &[f64]) -> NodeId {
    let y = match op {
        UnaryOp::Relu => tape.relu(x),
        UnaryOp::Sigmoid => tape.sigmoid(x),
        UnaryOp::Tanh => tape.tanh(x),
        UnaryOp::Exp => tape.exp(x),
        UnaryOp::AttentionSoftmax => tape.softmax(x, SoftmaxRole::Attention),
        UnaryOp::OutputSoftmax => tape.softmax(x, SoftmaxRole::Output),
        UnaryOp::LayerNorm => tape.layer_norm(x),
        UnaryOp::Affine => tape.affine(x, -1.7, 0.3),
        UnaryOp::Transpose => tape.transpose(x),
        UnaryOp::MatMulRight => {
            let w = tape.param(aux);
            tape.matmul(x, w)
        }
        UnaryOp::AddRow => {
            let row = tape.slice(x, Axis::Rows, 1, 1).unwrap();
            tape.add(x, row)
        }
        UnaryOp::MulSelf => {
            let t = tape.tanh(x).unwrap();
            tape.mul(x, t)
        }
        UnaryOp::Concat => {
            let t = tape.transpose(x).unwrap();
            let t = tape.transpose(t).unwrap();
            tape.concat(&[x, t], Axis::Cols)
        }
        UnaryOp::SliceRows => tape.slice(x, Axis::Rows, 1, 2),
        UnaryOp::SliceCols => tape.slice(x, Axis::Cols, 1, 2),
        UnaryOp::SumRows => tape.sum(x, Some(Axis::Rows)),
        UnaryOp::SumCols => tape.sum(x, Some(Axis::Cols)),
        UnaryOp::MeanRows => tape.mean(x, Some(Axis::Rows)),
        UnaryOp::MeanCols => tape.mean(x, Some(Axis::Cols)),
        UnaryOp::Lookup => tape.embedding_lookup(x, vec![2, 0, 2, 1]),
    }
    .unwrap();
    let n = tape.value(y).numel();
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(Tensor::new(shape, proj[..n].to_vec()).unwrap());
    let weighted = tape.mul(y, r).unwrap();
    tape.sum(weighted, None).unwrap()
}

fn eval(op: UnaryOp, x: &[f64], aux: &Tensor, proj: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xi = tape.input(Tensor::matrix(ROWS, COLS, x.to_vec()).unwrap());
    let out = build(&mut tape, op, xi, aux, proj);
    tape.value(out).item().unwrap()
}

fn relu_net<'a>(tape: &mut Tape<'a>, input: &[f64], w1: &'a Tensor, w2: &'a Tensor) -> (NodeId, NodeId) {
    let xi = tape.input(Tensor::matrix(ROWS, COLS, input.to_vec()).unwrap());
    let a = tape.param(w1);
    let b = tape.param(w2);
    let h = tape.matmul(xi, a).unwrap();
    let h = tape.relu(h).unwrap();
    let h = tape.matmul(h, b).unwrap();
    let h = tape.tanh(h).unwrap();
    let h = tape.mean(h, Some(Axis::Rows)).unwrap();
    let p = tape.softmax(h, SoftmaxRole::Output).unwrap();
    let p = tape.slice(p, Axis::Cols, 0, 1).unwrap();
    (xi, tape.sum(p, None).unwrap())
}

fn inputs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, ROWS * COLS)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    #[test]
    fn every_op_matches_central_differences(
        op_index in 0..OPS.len(),
        x in inputs(),
        aux in prop::collection::vec(-1.0f64..1.0, COLS * 5),
        proj in prop::collection::vec(-1.0f64..1.0, 2 * ROWS * COLS),
    ) {
        let op = OPS[op_index];
        // stay clear of the ReLU kink where the derivative is undefined
        if matches!(op, UnaryOp::Relu) {
            prop_assume!(x.iter().all(|v| v.abs() > 1e-3));
        }
        let aux = Tensor::matrix(COLS, 5, aux).unwrap();
        let mut tape = Tape::new();
        let xi = tape.input(Tensor::matrix(ROWS, COLS, x.clone()).unwrap());
        let out = build(&mut tape, op, xi, &aux, &proj);
        let grads = tape.backward(out, &BackwardPolicy::standard()).unwrap();
        let g = grads.wrt_or_zeros(xi, &tape);

        let h = 1e-5;
        for i in 0..x.len() {
            let mut up = x.clone();
            let mut down = x.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (eval(op, &up, &aux, &proj) - eval(op, &down, &aux, &proj)) / (2.0 * h);
            let a = g.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            prop_assert!(rel < 1e-4, "{op:?} entry {i}: autodiff {a} vs fd {fd}");
        }
    }

    #[test]
    fn deeplift_sums_to_output_difference(
        x in inputs(),
        x0 in inputs(),
        w1 in prop::collection::vec(-1.0f64..1.0, COLS * 6),
        w2 in prop::collection::vec(-1.0f64..1.0, 6 * 3),
    ) {
        let w1 = Tensor::matrix(COLS, 6, w1).unwrap();
        let w2 = Tensor::matrix(6, 3, w2).unwrap();
        let mut ref_tape = Tape::new();
        let (_, ref_out) = relu_net(&mut ref_tape, &x0, &w1, &w2);
        let reference = ReferenceActivations::capture(&ref_tape);
        let mut tape = Tape::new();
        let (xi, out) = relu_net(&mut tape, &x, &w1, &w2);
        let m = tape.backward(out, &BackwardPolicy::deeplift(&reference)).unwrap();
        let total: f64 = m.wrt(xi).unwrap().data().iter().zip(x.iter().zip(&x0)).map(|(m, (a, b))| m * (a - b)).sum();
        let delta = tape.value(out).item().unwrap() - ref_tape.value(ref_out).item().unwrap();
        prop_assert!((total - delta).abs() < 1e-6, "{total} vs {delta}");
    }

    #[test]
    fn backward_is_repeatable(x in inputs(), op_index in 0..OPS.len()) {
        let aux = Tensor::filled(&[COLS, 5], 0.3);
        let proj: Vec<f64> = (0..2 * ROWS * COLS).map(|i| (i as f64).sin()).collect();
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.input(Tensor::matrix(ROWS, COLS, x.clone()).unwrap());
            let out = build(&mut tape, OPS[op_index], xi, &aux, &proj);
            tape.backward(out, &BackwardPolicy::standard()).unwrap().wrt_or_zeros(xi, &tape)
        };
        prop_assert_eq!(run(), run());
    }
}
