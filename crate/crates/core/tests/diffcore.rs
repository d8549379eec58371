mod common;

use common::{max_fd_error, random_tensor, Bound};
use hedgelab::diffcore::{glorot, load_checkpoint, save_checkpoint, DiffError, Graph, OpKind, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn store_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

/// Contracts an op output with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, y.shape(), -1.0, 1.0);
    let prod = g.mul(y, &w)?;
    g.sum(&prod, None)
}

fn check_op(kind: OpKind<f64>, inputs: Vec<Tensor<f64>>) {
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("x{}", i)).collect();
    let store = store_of(names.iter().map(|n| n.as_str()).zip(inputs).collect());
    let err = max_fd_error(&store, H, |g, b: &Bound| {
        let xs: Vec<&Tensor<f64>> = names.iter().map(|n| &b[n]).collect();
        let y = g.apply(kind.clone(), &xs)?;
        weighted_sum(g, &y, 99)
    });
    assert!(err < TOL, "{}: relative error {}", kind.name(), err);
}

#[test]
fn every_op_kind_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |shape: &[usize], lo: f64, hi: f64| random_tensor(&mut rng, shape, lo, hi);
    check_op(OpKind::MatMul, vec![r(&[3, 4], -1.0, 1.0), r(&[4, 2], -1.0, 1.0)]);
    check_op(OpKind::BatchMatMul { trans_b: false }, vec![r(&[2, 3, 4], -1.0, 1.0), r(&[2, 4, 2], -1.0, 1.0)]);
    check_op(OpKind::BatchMatMul { trans_b: true }, vec![r(&[2, 3, 4], -1.0, 1.0), r(&[2, 5, 4], -1.0, 1.0)]);
    check_op(OpKind::Add, vec![r(&[3, 4], -1.0, 1.0), r(&[4], -1.0, 1.0)]);
    check_op(OpKind::Sub, vec![r(&[3, 4], -1.0, 1.0), r(&[3, 1], -1.0, 1.0)]);
    check_op(OpKind::Mul, vec![r(&[2, 3], -1.0, 1.0), r(&[2, 3], -1.0, 1.0)]);
    check_op(OpKind::Div, vec![r(&[2, 3], -1.0, 1.0), r(&[3], 0.5, 2.0)]);
    check_op(OpKind::Minimum, vec![r(&[2, 3], -1.0, 0.0), r(&[2, 3], 0.0, 1.0)]);
    check_op(OpKind::Maximum, vec![r(&[2, 3], -1.0, 0.0), r(&[2, 3], 0.0, 1.0)]);
    check_op(OpKind::Exp, vec![r(&[2, 3], -1.0, 1.0)]);
    check_op(OpKind::Ln, vec![r(&[2, 3], 0.2, 3.0)]);
    check_op(OpKind::Tanh, vec![r(&[2, 3], -2.0, 2.0)]);
    check_op(OpKind::Sigmoid, vec![r(&[2, 3], -3.0, 3.0)]);
    check_op(OpKind::Softplus, vec![r(&[2, 3], -3.0, 3.0)]);
    check_op(OpKind::Square, vec![r(&[2, 3], -2.0, 2.0)]);
    check_op(OpKind::Abs, vec![r(&[2, 3], 0.1, 1.0).map(|v| if v > 0.5 { v } else { -v })]);
    check_op(OpKind::Neg, vec![r(&[4], -1.0, 1.0)]);
    check_op(OpKind::Sqrt, vec![r(&[4], 0.5, 2.0)]);
    check_op(OpKind::Scale(-2.5), vec![r(&[4], -1.0, 1.0)]);
    check_op(OpKind::Shift(0.7), vec![r(&[4], -1.0, 1.0)]);
    check_op(OpKind::Clamp { lo: 0.8, hi: 1.2 }, vec![Tensor::vector(vec![0.5, 0.9, 1.1, 1.5]).unwrap()]);
    check_op(OpKind::Softmax { axis: 1 }, vec![r(&[3, 4], -2.0, 2.0)]);
    check_op(OpKind::Softmax { axis: 0 }, vec![r(&[3, 4], -2.0, 2.0)]);
    check_op(OpKind::Sum { axis: Some(0) }, vec![r(&[3, 4], -1.0, 1.0)]);
    check_op(OpKind::Sum { axis: None }, vec![r(&[3, 4], -1.0, 1.0)]);
    check_op(OpKind::Mean { axis: Some(1) }, vec![r(&[3, 4], -1.0, 1.0)]);
    check_op(OpKind::Mean { axis: None }, vec![r(&[2, 2, 2], -1.0, 1.0)]);
    check_op(OpKind::Concat { axis: 1 }, vec![r(&[2, 3], -1.0, 1.0), r(&[2, 1], -1.0, 1.0)]);
    check_op(OpKind::Concat { axis: 0 }, vec![r(&[2, 3], -1.0, 1.0), r(&[1, 3], -1.0, 1.0)]);
    check_op(OpKind::Slice { axis: 1, start: 1, end: 3 }, vec![r(&[2, 4], -1.0, 1.0)]);
    check_op(OpKind::Transpose, vec![r(&[2, 3], -1.0, 1.0)]);
    check_op(OpKind::Reshape(vec![3, 2]), vec![r(&[2, 3], -1.0, 1.0)]);
    check_op(OpKind::GatherRows(vec![2, 0, 2]), vec![r(&[3, 2], -1.0, 1.0)]);
    check_op(
        OpKind::GruCell,
        vec![
            r(&[2, 3], -1.0, 1.0),
            r(&[2, 4], -0.9, 0.9),
            r(&[3, 12], -0.7, 0.7),
            r(&[4, 12], -0.7, 0.7),
            r(&[12], -0.3, 0.3),
        ],
    );
}

#[test]
fn random_two_layer_tanh_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = store_of(vec![
        ("w1", glorot(&mut rng, 3, 5, 1.0)),
        ("b1", random_tensor(&mut rng, &[5], -0.1, 0.1)),
        ("w2", glorot(&mut rng, 5, 2, 1.0)),
        ("b2", random_tensor(&mut rng, &[2], -0.1, 0.1)),
    ]);
    let x = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
    let err = max_fd_error(&store, H, |g, p| {
        let h = g.linear(&x, &p["w1"], &p["b1"])?;
        let h = g.tanh(&h)?;
        let h = g.linear(&h, &p["w2"], &p["b2"])?;
        let h = g.tanh(&h)?;
        let sq = g.square(&h)?;
        g.mean(&sq, None)
    });
    assert!(err < TOL, "relative error {}", err);
}

#[test]
fn documented_forward_examples() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
    let y = g.matmul(&a, &b).unwrap();
    assert_eq!(y.shape(), &[2, 1]);
    assert_eq!(y.data(), &[3.0, 7.0]);

    let s = g.softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap(), 0).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    // ln(1 + e^0) = ln 2 = 0.693147180559945309...
    let sp = g.softplus(&Tensor::scalar(0.0)).unwrap();
    assert!((sp.item().unwrap() - 0.693_147_180_559_945_3).abs() < 1e-15);
}

#[test]
fn documented_backward_examples() {
    let store = store_of(vec![("w", Tensor::vector(vec![3.0]).unwrap())]);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let sq = g.square(&p["w"]).unwrap();
    let loss = g.sum(&sq, None).unwrap();
    assert_eq!(g.backward(&loss).unwrap()["w"].data(), &[6.0]);

    let store = store_of(vec![("w", Tensor::vector(vec![1.0, -2.0, 0.5, 4.0]).unwrap())]);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let loss = g.mean(&p["w"], None).unwrap();
    assert_eq!(g.backward(&loss).unwrap()["w"].data(), &[0.25; 4]);
}

#[test]
fn unreachable_parameters_get_zero_gradient() {
    let store = store_of(vec![
        ("used", Tensor::vector(vec![1.0, 2.0]).unwrap()),
        ("unused", Tensor::vector(vec![5.0, 5.0, 5.0]).unwrap()),
    ]);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let loss = g.sum(&p["used"], None).unwrap();
    let grads = g.backward(&loss).unwrap();
    assert_eq!(grads["unused"].data(), &[0.0; 3]);
    assert_eq!(grads["used"].data(), &[1.0, 1.0]);
}

#[test]
fn fan_out_gradients_accumulate() {
    let store = store_of(vec![("w", Tensor::vector(vec![2.0]).unwrap())]);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let y = g.mul(&p["w"], &p["w"]).unwrap();
    let z = g.add(&y, &p["w"]).unwrap();
    let loss = g.sum(&z, None).unwrap();
    // d(w^2 + w)/dw = 2w + 1
    assert_eq!(g.backward(&loss).unwrap()["w"].data(), &[5.0]);
}

#[test]
fn error_paths() {
    let mut g = Graph::<f64>::new();
    let a = Tensor::zeros(&[2, 3]);
    let err = g.matmul(&a, &a).unwrap_err();
    assert!(matches!(err, DiffError::Shape { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3]"));

    let big = Tensor::scalar(800.0);
    assert!(matches!(g.exp(&big), Err(DiffError::NonFinite { ref op }) if op == "exp"));

    let v = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(matches!(g.backward(&v), Err(DiffError::NonScalarLoss(_))));

    let mut other = Graph::<f64>::new();
    let foreign = other.constant(Tensor::scalar(1.0));
    assert!(matches!(g.neg(&foreign), Err(DiffError::ForeignTensor)));

    let s = g.sum(&v, None).unwrap();
    g.backward(&s).unwrap();
    assert!(matches!(g.backward(&s), Err(DiffError::GraphConsumed)));
}

#[test]
fn ln_is_guarded_at_zero() {
    let mut g = Graph::<f64>::new();
    let y = g.ln(&Tensor::scalar(0.0)).unwrap();
    assert!((y.item().unwrap() - 1e-300f64.ln()).abs() < 1e-9);
}

#[test]
fn graph_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 12], -1.0, 1.0);
    let u = random_tensor(&mut rng, &[4, 12], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[12], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let h = g.gru_cell(&x, &Tensor::zeros(&[3, 4]), &w, &u, &b).unwrap();
        let h = g.gru_cell(&x, &h, &w, &u, &b).unwrap();
        g.softmax(&h, 1).unwrap()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = store_of(vec![
        ("layer.w", glorot(&mut rng, 4, 3, 1.0)),
        ("layer.b", random_tensor(&mut rng, &[3], -1.0, 1.0)),
        ("scalar", Tensor::scalar(std::f64::consts::PI)),
    ]);
    let mut g = Graph::new();
    let p = g.bind(&store);
    let s = g.sum(&p["layer.w"], None).unwrap();
    let grads = g.backward(&s).unwrap();
    store.adam_step(&grads, &Default::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.ckpt");
    save_checkpoint(&store, &path).unwrap();
    let back: ParamStore<f64> = load_checkpoint(&path).unwrap();
    assert!(store.bit_eq(&back));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"HLCKPT\0\0");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let mut g = Graph::new();
        let y = g.softmax(&x, axis).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= 0.0));
        let s = g.sum(&y, Some(axis)).unwrap();
        for v in s.data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_outputs_stay_inside_unit_interval(
        x in proptest::collection::vec(-3.0f64..3.0, 6),
        h in proptest::collection::vec(-0.99f64..0.99, 8),
        w in proptest::collection::vec(-2.0f64..2.0, 36),
        u in proptest::collection::vec(-2.0f64..2.0, 48),
        b in proptest::collection::vec(-1.0f64..1.0, 12),
    ) {
        let mut g = Graph::new();
        let out = g.gru_cell(
            &Tensor::new(vec![2, 3], x).unwrap(),
            &Tensor::new(vec![2, 4], h).unwrap(),
            &Tensor::new(vec![3, 12], w).unwrap(),
            &Tensor::new(vec![4, 12], u).unwrap(),
            &Tensor::new(vec![12], b).unwrap(),
        ).unwrap();
        prop_assert!(out.data().iter().all(|v| v.abs() < 1.0));
    }
}
