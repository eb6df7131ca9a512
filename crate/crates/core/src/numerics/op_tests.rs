use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random_tensor(rng: &mut ChaCha8Rng, [r, c]: [usize; 2]) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Builds `sum(op(inputs) ⊙ probe)` for a fixed random probe, returning
/// value, input gradients and kink signature.
fn probe_op<F>(build: &F, inputs: &[Tensor], probe: &Tensor) -> Result<(f64, Vec<Tensor>, u64)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    let p = g.input(probe.clone());
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;
    let input_grads = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.node(id).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();
    Ok((g.value(loss).item()?, input_grads, g.kink_signature()))
}

/// Gradient-checks `build` on random inputs of the given shapes.
fn check_op<F>(name: &str, build: F, shapes: &[[usize; 2]], positive: bool) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|&s| {
                let t = random_tensor(&mut rng, s);
                if positive {
                    t.map(|x| x.abs() + 0.5)
                } else {
                    t
                }
            })
            .collect();
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids).unwrap();
        let out_shape = g.shape(out);
        let probe = random_tensor(&mut rng, out_shape);

        let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let unflatten = |p: &[f64]| -> Vec<Tensor> {
            let mut off = 0;
            inputs
                .iter()
                .zip(&sizes)
                .map(|(t, &n)| {
                    let out = Tensor::from_vec(t.rows(), t.cols(), p[off..off + n].to_vec()).unwrap();
                    off += n;
                    out
                })
                .collect()
        };
        let report = finite_difference_check(
            |p, _| {
                let (v, gs, kinks) = probe_op(&build, &unflatten(p), &probe)?;
                let grad = gs.iter().flat_map(|t| t.data().to_vec()).collect();
                Ok(Evaluation { value: v, gradient: Some(grad), kinks })
            },
            &flat,
            DEFAULT_EPS,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst <= 1e-5, "{name}: max relative error {worst}");
    worst
}

#[test]
fn every_op_passes_gradient_check() {
    check_op("matmul", |g, x| g.matmul(x[0], x[1]), &[[3, 5], [5, 4]], false);
    check_op("transpose", |g, x| Ok(g.transpose(x[0])), &[[3, 7]], false);
    check_op("concat_cols", |g, x| g.concat_cols(&[x[0], x[1]]), &[[3, 2], [3, 5]], false);
    check_op("concat_rows", |g, x| g.concat_rows(&[x[0], x[1]]), &[[2, 4], [5, 4]], false);
    check_op("slice_rows", |g, x| g.slice_rows(x[0], 2, 3), &[[6, 3]], false);
    check_op("slice_cols", |g, x| g.slice_cols(x[0], 1, 4), &[[3, 6]], false);
    check_op("gather_rows", |g, x| g.gather_rows(x[0], &[0, 3, 3, 1]), &[[4, 3]], false);
    check_op("reshape", |g, x| g.reshape(x[0], 2, 6), &[[4, 3]], false);
    check_op("broadcast_rows", |g, x| g.broadcast_rows(x[0], 5), &[[1, 4]], false);
    check_op("broadcast_cols", |g, x| g.broadcast_cols(x[0], 3), &[[6, 1]], false);
    check_op("add", |g, x| g.add(x[0], x[1]), &[[4, 3], [4, 3]], false);
    check_op("sub", |g, x| g.sub(x[0], x[1]), &[[4, 3], [4, 3]], false);
    check_op("mul", |g, x| g.mul(x[0], x[1]), &[[4, 3], [4, 3]], false);
    check_op("div", |g, x| g.div(x[0], x[1]), &[[4, 3], [4, 3]], true);
    check_op("scale", |g, x| Ok(g.scale(x[0], -2.5)), &[[3, 3]], false);
    check_op("add_scalar", |g, x| Ok(g.add_scalar(x[0], 1.5)), &[[3, 3]], false);
    check_op("tanh", |g, x| Ok(g.tanh(x[0])), &[[5, 4]], false);
    check_op("sigmoid", |g, x| Ok(g.sigmoid(x[0])), &[[5, 4]], false);
    check_op("leaky_relu", |g, x| Ok(g.leaky_relu(x[0])), &[[5, 4]], false);
    check_op("relu", |g, x| Ok(g.relu(x[0])), &[[5, 4]], false);
    check_op("abs", |g, x| Ok(g.abs(x[0])), &[[5, 4]], false);
    check_op("reciprocal", |g, x| g.reciprocal(x[0]), &[[5, 4]], true);
    check_op("sqrt", |g, x| g.sqrt(x[0]), &[[3, 6]], true);
    check_op("softmax_rows", |g, x| Ok(g.softmax(x[0], Axis::Rows)), &[[6, 3]], false);
    check_op("softmax_cols", |g, x| Ok(g.softmax(x[0], Axis::Cols)), &[[3, 6]], false);
    check_op("mean_rows", |g, x| g.mean(x[0], Axis::Rows), &[[6, 3]], false);
    check_op("mean_cols", |g, x| g.mean(x[0], Axis::Cols), &[[3, 6]], false);
    check_op("sum", |g, x| Ok(g.sum(x[0])), &[[3, 6]], false);
    check_op("causal_conv", |g, x| g.causal_conv(x[0], x[1], 3, 1), &[[7, 2], [4, 6]], false);
    check_op("causal_conv_lanes", |g, x| g.causal_conv(x[0], x[1], 2, 3), &[[6, 2], [3, 4]], false);
    check_op("softmax_nll", |g, x| g.softmax_nll(x[0]), &[[4, 5]], false);
    check_op(
        "batch_norm_train",
        |g, x| Ok(g.batch_norm_train(x[0], x[1], x[2], 1e-5)?.0),
        &[[6, 3], [1, 3], [1, 3]],
        false,
    );
    check_op(
        "batch_norm_infer",
        |g, x| g.batch_norm_infer(x[0], x[1], x[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5),
        &[[6, 3], [1, 3], [1, 3]],
        false,
    );
}

#[test]
fn embedding_gradient_scatters_into_table() {
    let mut store = ParamStore::new();
    let table = store.add("emb", ParamKind::Embedding, Tensor::from_fn(2, 4, |r, c| (r * 4 + c) as f64));
    let mut g = Graph::new();
    let e = g.embedding(&store, table, &[3, 1, 3]).unwrap();
    assert_eq!(g.value(e).column_vec(0), vec![3.0, 7.0]);
    let loss = g.sum(e);
    let grads = g.backward(loss).unwrap();
    let gt = grads.param(table).unwrap();
    assert_eq!(gt.column_vec(3), vec![2.0, 2.0]);
    assert_eq!(gt.column_vec(1), vec![1.0, 1.0]);
    assert_eq!(gt.column_vec(0), vec![0.0, 0.0]);
    assert!(g.embedding(&store, table, &[4]).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::column(vec![0.0; 3]));
    let s = g.softmax(x, Axis::Rows);
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_points() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(0.0));
    let t = g.tanh(x);
    let s = g.sigmoid(x);
    assert_eq!(g.value(t).item().unwrap(), 0.0);
    assert_eq!(g.value(s).item().unwrap(), 0.5);
}

#[test]
fn square_has_derivative_six_at_three() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.node(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let v = g.input(Tensor::column(vec![0.3, -1.2, 2.0, 0.7]));
    let s = g.softmax(v, Axis::Rows);
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    for d in grads.node(v).unwrap().data() {
        assert!(d.abs() < 1e-15, "{d}");
    }
}

#[test]
fn mean_leaky_relu_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w = random_tensor(&mut rng, [4, 4]);
    let x = random_tensor(&mut rng, [4, 1]);
    let f = |p: &[f64], _: bool| -> Result<Evaluation> {
        let mut g = Graph::new();
        let wn = g.input(Tensor::from_vec(4, 4, p.to_vec())?);
        let xn = g.input(x.clone());
        let h = g.matmul(wn, xn)?;
        let a = g.leaky_relu(h);
        let m = g.mean(a, Axis::Rows)?;
        let grads = g.backward(m)?;
        Ok(Evaluation {
            value: g.value(m).item()?,
            gradient: Some(grads.node(wn).unwrap().data().to_vec()),
            kinks: g.kink_signature(),
        })
    };
    let report = finite_difference_check(f, w.data(), DEFAULT_EPS).unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
}

#[test]
fn kink_tie_breaking() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![0.0, -2.0]));
    let l = g.leaky_relu(x);
    let a = g.abs(x);
    let both = g.add(l, a).unwrap();
    let s = g.sum(both);
    let grads = g.backward(s).unwrap();
    // leaky_relu'(0) = 1, |x|'(0) = 0; at −2: 0.01 + (−1).
    assert_eq!(grads.node(x).unwrap().data(), &[1.0, LEAKY_SLOPE - 1.0]);
}

#[test]
fn error_contracts() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(2, 3));
    let b = g.input(Tensor::zeros(3, 3));
    let err = g.add(a, b).unwrap_err();
    assert!(err.to_string().contains("add") && err.to_string().contains("[2, 3]"), "{err}");
    assert!(matches!(g.div(b, b), Err(Error::DivisionByZero { .. })));
    assert!(matches!(g.reciprocal(a), Err(Error::DivisionByZero { .. })));
    assert!(matches!(g.backward(a), Err(Error::NonScalarLoss([2, 3]))));
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random_tensor(&mut rng, [3, 4]);
    let grad_of = |coef: (f64, f64)| {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let t = g.tanh(x);
        let l1 = g.sum(t);
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq, Axis::Cols).unwrap();
        let l2 = g.sum(m);
        let a = g.scale(l1, coef.0);
        let b = g.scale(l2, coef.1);
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap().node(x).unwrap().clone()
    };
    let g1 = grad_of((1.0, 0.0));
    let g2 = grad_of((0.0, 1.0));
    let combo = grad_of((2.5, -0.75));
    for i in 0..combo.len() {
        let expect = 2.5 * g1.data()[i] - 0.75 * g2.data()[i];
        assert!((combo.data()[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn causal_conv_hand_case() {
    // d_in = 1, width 2, kernel [1, 1], input [1, 2, 3] → [1, 3, 5].
    let mut g = Graph::new();
    let x = g.input(Tensor::column(vec![1.0, 2.0, 3.0]));
    let k = g.input(Tensor::row(vec![1.0, 1.0]));
    let y = g.causal_conv(x, k, 2, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);
}

#[test]
fn causal_conv_lanes_are_independent() {
    // Two interleaved lanes: [1, 10, 2, 20, 3, 30].
    let mut g = Graph::new();
    let x = g.input(Tensor::column(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]));
    let k = g.input(Tensor::row(vec![1.0, 1.0]));
    let y = g.causal_conv(x, k, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 10.0, 3.0, 30.0, 5.0, 50.0]);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..4) {
        let rows = values.len().div_ceil(cols);
        let mut data = values.clone();
        data.resize(rows * cols, 0.0);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(rows, cols, data).unwrap());
        let s = g.softmax(x, Axis::Rows);
        let out = g.value(s);
        for c in 0..cols {
            let total: f64 = (0..rows).map(|r| out.get(r, c)).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for r in 0..rows {
                prop_assert!(out.get(r, c) >= 0.0);
            }
        }
    }

    #[test]
    fn causal_conv_ignores_the_future(seed in 0u64..1000, pos in 0usize..6, width in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, [6, 3]);
        let k = random_tensor(&mut rng, [4, 3 * width]);
        let mut perturbed = x.clone();
        for r in pos + 1..6 {
            for c in 0..3 {
                perturbed.set(r, c, rng.gen_range(-100.0..100.0));
            }
        }
        let run = |input: Tensor| {
            let mut g = Graph::new();
            let xi = g.input(input);
            let ki = g.input(k.clone());
            let y = g.causal_conv(xi, ki, width, 1).unwrap();
            g.value(y).clone()
        };
        let a = run(x);
        let b = run(perturbed);
        for r in 0..=pos {
            prop_assert_eq!(a.row_slice(r), b.row_slice(r));
        }
    }
}
