use ctxslt::numerics::{
    cross_entropy_label_smoothed, gradient_check, Graph, ParamStore, Tensor, LAYER_NORM_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn constant(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> ctxslt::numerics::Var {
    g.constant(Tensor::new(shape, data).unwrap()).unwrap()
}

fn triple_loop(x: &[f64], w: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += x[i * k + p] * w[p * n + j];
            }
            out[i * n + j] = acc + b[j];
        }
    }
    out
}

#[test]
fn linear_matches_triple_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let expected = triple_loop(&x, &w, &b, 3, 4, 2);

    let mut g = Graph::new();
    let xv = constant(&mut g, vec![3, 4], x);
    let wv = constant(&mut g, vec![4, 2], w);
    let bv = constant(&mut g, vec![2], b);
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    // The oracle sums in the same order starting from zero, then adds the bias;
    // the implementation seeds with the bias. Compare within one rounding step.
    for (got, want) in g.value(y).data().iter().zip(&expected) {
        assert!((got - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(1.0), "{got} vs {want}");
    }
    // Without bias the summation order is identical: exact equality.
    let zero = vec![0.0; 2];
    let exact = triple_loop(g.value(xv).data(), g.value(wv).data(), &zero, 3, 4, 2);
    let y0 = g.matmul(xv, wv).unwrap();
    assert_eq!(g.value(y0).data(), exact.as_slice());
}

#[test]
fn layer_norm_matches_direct_formula() {
    let row = [1.0, 2.0, 3.0, 4.0];
    let mean = row.iter().sum::<f64>() / 4.0;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    let expected: Vec<f64> = row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();

    let mut g = Graph::new();
    let x = constant(&mut g, vec![1, 4], row.to_vec());
    let gain = constant(&mut g, vec![4], vec![1.0; 4]);
    let bias = constant(&mut g, vec![4], vec![0.0; 4]);
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn softmax_matches_direct_exp_sum() {
    let xs = [1.0f64, 2.0, 3.0];
    let z: f64 = xs.iter().map(|v| v.exp()).sum();
    let oracle: Vec<f64> = xs.iter().map(|v| v.exp() / z).collect();
    let frozen = [0.09003057, 0.24472847, 0.66524096];

    let mut g = Graph::new();
    let x = constant(&mut g, vec![1, 3], xs.to_vec());
    let y = g.softmax(x).unwrap();
    for ((got, o), f) in g.value(y).data().iter().zip(&oracle).zip(&frozen) {
        assert!((got - o).abs() <= 1e-15);
        assert!((got - f).abs() <= 1e-7);
    }

    let x = constant(&mut g, vec![1, 3], vec![0.0; 3]);
    let y = g.softmax(x).unwrap();
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_reference_values() {
    let mut g = Graph::new();
    // uniform over 4 classes, no smoothing
    let logits = constant(&mut g, vec![1, 4], vec![0.5; 4]);
    let l = cross_entropy_label_smoothed(&mut g, logits, &[2], 0.0, 99).unwrap();
    assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    assert!((g.value(l).data()[0] - 1.3862944).abs() < 1e-7);

    // confident, correct prediction
    let logits = constant(&mut g, vec![1, 3], vec![60.0, 0.0, 0.0]);
    let l = cross_entropy_label_smoothed(&mut g, logits, &[0], 0.0, 99).unwrap();
    assert!(g.value(l).data()[0] < 1e-20);

    // uniform prediction is invariant to smoothing: sum_v q(v) * ln 3 = ln 3
    let logits = constant(&mut g, vec![1, 3], vec![0.0; 3]);
    let l = cross_entropy_label_smoothed(&mut g, logits, &[0], 0.1, 99).unwrap();
    assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);

    // padding rows are excluded from the mean
    let logits = constant(&mut g, vec![2, 3], vec![0.0, 0.0, 0.0, 9.0, -3.0, 4.0]);
    let l = cross_entropy_label_smoothed(&mut g, logits, &[1, 0], 0.0, 0).unwrap();
    assert!((g.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn gradient_check_quadratic() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let err = gradient_check(&mut store, 1e-5, usize::MAX, |g, s| {
        let v = g.param(s, x);
        let sq = g.mul(v, v)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn gradient_check_cross_entropy() {
    let mut store = ParamStore::new();
    let logits = store
        .add(
            "logits",
            Tensor::new(vec![2, 3], vec![0.2, -0.4, 1.1, 0.0, 0.7, -0.9]).unwrap(),
        )
        .unwrap();
    for smoothing in [0.0, 0.1] {
        let err = gradient_check(&mut store, 1e-5, usize::MAX, |g, s| {
            let v = g.param(s, logits);
            g.cross_entropy(v, &[Some(2), Some(0)], smoothing)
        })
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }
}

#[test]
fn gradient_check_layer_norm_softmax_relu_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let mut rand_tensor = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = store.add("x", rand_tensor(vec![3, 5])).unwrap();
    let w = store.add("w", rand_tensor(vec![5, 4])).unwrap();
    let b = store.add("b", rand_tensor(vec![4])).unwrap();
    let gain = store.add("gain", rand_tensor(vec![4])).unwrap();
    let bias = store.add("bias", rand_tensor(vec![4])).unwrap();
    let err = gradient_check(&mut store, 1e-5, usize::MAX, |g, s| {
        let (x, w, b, gain, bias) = (g.param(s, x), g.param(s, w), g.param(s, b), g.param(s, gain), g.param(s, bias));
        let h = g.linear(x, w, Some(b))?;
        let h = g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?;
        let h = g.relu(h)?;
        let h = g.scale(h, 1.7)?;
        let p = g.softmax(h)?;
        let sq = g.mul(p, h)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn gradient_check_gather_scatters_into_table() {
    let mut store = ParamStore::new();
    let table = store
        .add("table", Tensor::new(vec![4, 2], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap())
        .unwrap();
    let err = gradient_check(&mut store, 1e-5, usize::MAX, |g, s| {
        let t = g.param(s, table);
        let rows = g.gather(t, &[1, 1, 3])?;
        let sq = g.mul(rows, rows)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e3f64..1e3, 1..12)) {
        let mut g = Graph::new();
        let n = row.len();
        let x = constant(&mut g, vec![1, n], row);
        let y = g.softmax(x).unwrap();
        let sum: f64 = g.value(y).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn layer_norm_row_statistics(row in proptest::collection::vec(-50f64..50.0, 2..10)) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        prop_assume!(var > 1e-6);
        let d = row.len();
        let mut g = Graph::new();
        let x = constant(&mut g, vec![1, d], row);
        let gain = constant(&mut g, vec![d], vec![1.0; d]);
        let bias = constant(&mut g, vec![d], vec![0.0; d]);
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        let out = g.value(y).data();
        let m = out.iter().sum::<f64>() / d as f64;
        let v = out.iter().map(|e| (e - m).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(m.abs() <= 1e-10);
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS / var);
        prop_assert!((v - expected).abs() <= 1e-6);
    }

    #[test]
    fn backward_is_linear_in_the_loss(a in proptest::collection::vec(-2f64..2.0, 4), c in -3f64..3.0) {
        // grad(f1 + c*f2) == grad(f1) + c*grad(f2)
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(a)).unwrap();
        let grads = |store: &mut ParamStore, which: u8| {
            store.clear_grad();
            let mut g = Graph::new();
            let v = g.param(store, x);
            let sq = g.mul(v, v).unwrap();
            let f1 = g.sum(sq).unwrap();
            let sm = g.softmax(v).unwrap();
            let prod = g.mul(sm, v).unwrap();
            let f2 = g.sum(prod).unwrap();
            let root = match which {
                1 => f1,
                2 => f2,
                _ => {
                    let s = g.scale(f2, c).unwrap();
                    g.add(f1, s).unwrap()
                }
            };
            g.backward(root).unwrap();
            g.grad(v).unwrap().to_vec()
        };
        let g1 = grads(&mut store, 1);
        let g2 = grads(&mut store, 2);
        let both = grads(&mut store, 3);
        for i in 0..4 {
            prop_assert!((both[i] - (g1[i] + c * g2[i])).abs() <= 1e-12);
        }
    }
}
