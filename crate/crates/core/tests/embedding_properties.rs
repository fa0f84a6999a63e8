use ctxslt::embedding::*;
use ctxslt::numerics::{Graph, ParamStore, Tensor, LAYER_NORM_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn projection(store: &mut ParamStore, w: Tensor, b: Vec<f64>, g: Vec<f64>, beta: Vec<f64>) -> FeatureProjection {
    let input_dim = w.rows();
    FeatureProjection {
        weight: store.add("w", w).unwrap(),
        bias: store.add("b", Tensor::vector(b)).unwrap(),
        norm_gain: store.add("g", Tensor::vector(g)).unwrap(),
        norm_bias: store.add("beta", Tensor::vector(beta)).unwrap(),
        input_dim,
    }
}

/// Hand-rolled linear map then layer normalization.
fn oracle_embed(x: &Tensor, w: &Tensor, b: &[f64], gain: &[f64], beta: &[f64]) -> Vec<f64> {
    let (d_in, d_out) = (w.rows(), w.cols());
    let mut out = vec![];
    for r in 0..x.rows() {
        let mut h = vec![0.0; d_out];
        for (j, hj) in h.iter_mut().enumerate() {
            *hj = b[j];
            for i in 0..d_in {
                *hj += x.row(r)[i] * w.row(i)[j];
            }
        }
        let mean = h.iter().sum::<f64>() / d_out as f64;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d_out as f64;
        for j in 0..d_out {
            out.push(gain[j] * (h[j] - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[j]);
        }
    }
    out
}

#[test]
fn feature_embed_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (rows, d_in, d_out) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(2..9));
        let x = random_tensor(&mut rng, rows, d_in);
        let w = random_tensor(&mut rng, d_in, d_out);
        let b: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gain: Vec<f64> = (0..d_out).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = oracle_embed(&x, &w, &b, &gain, &beta);
        let mut store = ParamStore::new();
        let proj = projection(&mut store, w, b, gain, beta);
        let mut g = Graph::new();
        let feats = WindowedFeatures {
            windows: x,
            window_size: WINDOW_SIZE,
            stride: WINDOW_STRIDE,
        };
        let y = feature_embed(&mut g, &store, &feats, &proj).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_input_embeds_to_zero_and_identity_is_plain_layer_norm() {
    let d = 4;
    let mut store = ParamStore::new();
    let proj = projection(&mut store, Tensor::zeros(vec![d, d]), vec![0.0; d], vec![1.0; d], vec![0.0; d]);
    let mut g = Graph::new();
    let feats = WindowedFeatures {
        windows: Tensor::zeros(vec![3, d]),
        window_size: 16,
        stride: 4,
    };
    let y = feature_embed(&mut g, &store, &feats, &proj).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let mut eye = Tensor::zeros(vec![d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    let mut store = ParamStore::new();
    let proj = projection(&mut store, eye, vec![0.0; d], vec![1.0; d], vec![0.0; d]);
    let x = Tensor::from_rows(&[vec![1.0, 2.0, 4.0, -3.0]]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = proj.forward(&mut g, &store, xv).unwrap();
    let (gain, bias) = (g.constant(Tensor::vector(vec![1.0; d])).unwrap(), g.constant(Tensor::zeros(vec![d])).unwrap());
    let xv2 = g.constant(x).unwrap();
    let ln = g.layer_norm(xv2, gain, bias, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y), g.value(ln));
    let mean = g.value(y).data().iter().sum::<f64>() / d as f64;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn feature_width_mismatch_is_reported() {
    let mut store = ParamStore::new();
    let proj = projection(&mut store, Tensor::zeros(vec![3, 4]), vec![0.0; 4], vec![1.0; 4], vec![0.0; 4]);
    let mut g = Graph::new();
    let feats = WindowedFeatures {
        windows: Tensor::zeros(vec![2, 5]),
        window_size: 16,
        stride: 4,
    };
    assert_eq!(
        feature_embed(&mut g, &store, &feats, &proj).unwrap_err(),
        EmbeddingError::WidthMismatch { expected: 3, got: 5 }
    );
}

#[test]
fn repeated_tokens_scatter_twice_and_unused_rows_stay_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let weights = store.add("embed", random_tensor(&mut rng, 5, 3)).unwrap();
    let table = EmbeddingTable { vocab_size: 5, dim: 3, weights };
    let mut g = Graph::new();
    let y = word_embed(&mut g, &store, &[2, 2, 4], &table).unwrap();
    assert_eq!(g.value(y).row(0), store.get(weights).tensor.row(2));
    assert_eq!(g.value(y).row(0), g.value(y).row(1));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    store.zero_grad();
    g.accumulate_param_grads(&mut store);
    let grad = store.get(weights).grad.clone().unwrap();
    for r in 0..5 {
        let want = match r {
            2 => 2.0,
            4 => 1.0,
            _ => 0.0,
        };
        assert!(grad[r * 3..r * 3 + 3].iter().all(|&v| v == want), "row {r}");
    }
}

proptest! {
    #[test]
    fn window_count_formula(t in 16usize..=400) {
        let seq = FeatureSequence::new("v", Tensor::zeros(vec![t, 2]));
        let w = sign_embed(&seq, &MeanPool, 16, 4).unwrap();
        prop_assert_eq!(w.len(), (t - 16) / 4 + 1);
        let (_, end) = window_span(w.len() - 1, 16, 4);
        prop_assert!(end <= t);
        prop_assert!(end + 4 > t);
    }

    #[test]
    fn positional_encoding_is_additive(seed in any::<u64>(), n in 1usize..12, half in 1usize..6) {
        let d = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random_tensor(&mut rng, n, d), random_tensor(&mut rng, n, d));
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
        let (px, py) = (positional_encode(&mut g, xv, n).unwrap(), positional_encode(&mut g, yv, n).unwrap());
        let pe = positional_table(n, d).unwrap();
        for i in 0..n * d {
            prop_assert_eq!(g.value(px).data()[i], x.data()[i] + pe.data()[i]);
            let lhs = g.value(px).data()[i] - g.value(py).data()[i];
            let rhs = (x.data()[i] + pe.data()[i]) - (y.data()[i] + pe.data()[i]);
            prop_assert_eq!(lhs, rhs);
        }
    }

    #[test]
    fn fmat_round_trips(seed in any::<u64>(), t in 1usize..20, f in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..t * f).map(|_| rng.random::<f64>() * 10f64.powi(rng.random_range(-8..8))).collect();
        let m = Tensor::new(vec![t, f], data).unwrap();
        prop_assert_eq!(parse_fmat(&format_fmat(&m).unwrap()).unwrap(), m);
    }
}
