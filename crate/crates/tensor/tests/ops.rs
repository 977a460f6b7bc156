use crossdtr_tensor::nn::{Linear, MultiHeadAttention};
use crossdtr_tensor::{Graph, ParamStore, Precision, Tensor, TensorError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn g64() -> Graph {
    Graph::new(Precision::F64)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = g64();
    let m = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).unwrap();
    let i = g.constant(Tensor::eye(3));
    let mv = g.constant(m.clone());
    let out = g.matmul(i, mv).unwrap();
    assert_eq!(g.value(out), &m);

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1]);
    assert_eq!(g.value(c).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = g64();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_broadcasts_batch_dims() {
    let mut g = g64();
    let a = g.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 1, 2]);
    assert_eq!(g.value(c).data(), &[1.0, 4.0, 3.0, 8.0]);
}

#[test]
fn softmax_hand_cases() {
    let mut g = g64();
    let x = g.constant(Tensor::full(vec![4], 3.7));
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[0.25; 4], 1e-12);

    let x = g.constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[0.25, 0.75], 1e-12);

    // max-subtraction keeps huge logits finite
    let x = g.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[0.5, 0.5], 1e-12);
}

#[test]
fn softmax_bad_axis() {
    let mut g = g64();
    let x = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(
        g.softmax(x, 2),
        Err(TensorError::Axis { axis: 2, rank: 2 })
    ));
}

#[test]
fn conv2d_identity_and_box_sum() {
    let mut g = g64();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = Tensor::uniform(vec![1, 2, 4, 5], 1.0, &mut rng);
    let x = g.constant(input.clone());
    // 1x1 identity over 2 channels
    let k = g.constant(Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(g.value(y), &input);

    let ones = g.constant(Tensor::ones(vec![1, 1, 5, 5]));
    let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = g.conv2d(ones, k, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 5, 5]);
    let v = g.value(y).data();
    assert_eq!(v[2 * 5 + 2], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[2], 6.0);
}

#[test]
fn conv2d_output_size_and_errors() {
    let mut g = g64();
    let x = g.constant(Tensor::zeros(vec![1, 3, 32, 96]));
    let k = g.constant(Tensor::zeros(vec![8, 3, 3, 3]));
    let y = g.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 16, 48]);

    let small = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let big = g.constant(Tensor::zeros(vec![1, 1, 5, 5]));
    assert!(matches!(
        g.conv2d(small, big, 1, 1),
        Err(TensorError::Shape { .. })
    ));
    let even = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    assert!(matches!(
        g.conv2d(big, even, 1, 0),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = g64();
    let x = g.constant(Tensor::full(vec![2, 4], 5.0));
    let gain = g.constant(Tensor::ones(vec![4]));
    let bias = g.constant(Tensor::zeros(vec![4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn elementwise_basics() {
    let mut g = g64();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z);
    assert_eq!(g.item(s).unwrap(), 0.5);
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let ls = g.log_sigmoid(x);
    for (v, xv) in g.value(ls).data().iter().zip([-1.0f64, 0.0, 2.0]) {
        assert!((v - (1.0 / (1.0 + (-xv).exp())).ln()).abs() < 1e-12);
    }
    let big = g.constant(Tensor::scalar(-800.0));
    let lb = g.log_sigmoid(big);
    assert!((g.item(lb).unwrap() + 800.0).abs() < 1e-9);
}

#[test]
fn layout_ops() {
    let mut g = g64();
    let x = g.constant(Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let t = g.transpose(x, 0, 1).unwrap();
    assert_eq!(g.shape(t), &[3, 2]);
    assert_eq!(g.value(t).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    let c = g.concat(&[x, x], 1).unwrap();
    assert_eq!(
        g.value(c).data(),
        &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 3.0, 4.0, 5.0]
    );
    let n = g.narrow(c, 1, 2, 2).unwrap();
    assert_eq!(g.value(n).data(), &[2.0, 0.0, 5.0, 3.0]);
    let r = g.select_rows(x, &[1, 1, 0]).unwrap();
    assert_eq!(
        g.value(r).data(),
        &[3.0, 4.0, 5.0, 3.0, 4.0, 5.0, 0.0, 1.0, 2.0]
    );
    let s = g.sum_axis(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[3.0, 5.0, 7.0]);
    let m = g.mean_axis(x, 1).unwrap();
    assert_eq!(g.value(m).data(), &[1.0, 4.0]);
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new(Precision::F64);
    let mha = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    // non-zero biases so the projection path is fully exercised
    for id in mha.params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(shape, 0.5, &mut rng);
    }
    let mut g = g64();
    let q = g.constant(Tensor::uniform(vec![3, 8], 1.0, &mut rng));
    let kv = g.constant(Tensor::uniform(vec![1, 8], 1.0, &mut rng));
    let out = mha.forward(&mut g, &store, q, kv, kv).unwrap();
    let vproj = mha.value.forward(&mut g, &store, kv).unwrap();
    let expect = mha.output.forward(&mut g, &store, vproj).unwrap();
    let row = g.value(expect).data().to_vec();
    for r in 0..3 {
        close(&g.value(out).data()[r * 8..(r + 1) * 8], &row, 1e-12);
    }
}

#[test]
fn attention_identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new(Precision::F64);
    let mha = MultiHeadAttention::new(&mut store, "attn", 8, 4, &mut rng).unwrap();
    let mut g = g64();
    let q = g.constant(Tensor::uniform(vec![2, 8], 1.0, &mut rng));
    let key_row = Tensor::uniform(vec![1, 8], 1.0, &mut rng);
    let keys = Tensor::new(vec![5, 8], key_row.data().repeat(5)).unwrap();
    let k = g.constant(keys);
    let v = g.constant(Tensor::uniform(vec![5, 8], 1.0, &mut rng));
    let out = mha.forward(&mut g, &store, q, k, v).unwrap();
    let vmean = g.mean_axis(v, 0).unwrap();
    let vmean = g.reshape(vmean, &[1, 8]).unwrap();
    let vproj = mha.value.forward(&mut g, &store, vmean).unwrap();
    let expect = mha.output.forward(&mut g, &store, vproj).unwrap();
    let row = g.value(expect).data().to_vec();
    for r in 0..2 {
        close(&g.value(out).data()[r * 8..(r + 1) * 8], &row, 1e-12);
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new(Precision::F32);
    let err = MultiHeadAttention::new(&mut store, "attn", 10, 4, &mut rng).unwrap_err();
    assert!(matches!(err, TensorError::Config(_)));
}

#[test]
fn backward_simple_sums() {
    let mut g = g64();
    let xv = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let x = g.leaf(xv.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = g64();
    let x = g.leaf(xv.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_rejects_misuse() {
    let mut g = g64();
    let x = g.leaf(Tensor::ones(vec![2]));
    let y = g.scale(x, 2.0);
    assert!(matches!(g.backward(y), Err(TensorError::Usage(_))));
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.backward(s), Err(TensorError::TapeConsumed));
}

#[test]
fn accumulation_over_two_passes_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new(Precision::F64);
    let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng).unwrap();
    let inputs = [
        Tensor::uniform(vec![4, 3], 1.0, &mut rng),
        Tensor::uniform(vec![4, 3], 1.0, &mut rng),
    ];
    let run = |store: &mut ParamStore, x: &Tensor| {
        let mut g = g64();
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, store, xv).unwrap();
        let y = g.tanh(y);
        let l = g.sum(y);
        g.backward_into(l, store).unwrap();
    };
    let mut separate = Vec::new();
    for x in &inputs {
        let mut s = store.clone();
        run(&mut s, x);
        separate.push(s);
    }
    let mut both = store.clone();
    for x in &inputs {
        run(&mut both, x);
    }
    for id in store.ids() {
        let expect: Vec<f64> = separate[0]
            .grad(id)
            .data()
            .iter()
            .zip(separate[1].grad(id).data())
            .map(|(a, b)| a + b)
            .collect();
        close(both.grad(id).data(), &expect, 1e-12);
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new(Precision::F64);
    let lin = Linear::new(&mut store, "l", 2, 2, true, &mut rng).unwrap();
    store.set_trainable(lin.weight, false);
    let mut g = g64();
    let x = g.constant(Tensor::ones(vec![1, 2]));
    let y = lin.forward(&mut g, &store, x).unwrap();
    let l = g.sum(y);
    g.backward_into(l, &mut store).unwrap();
    assert!(store.grad(lin.weight).data().iter().all(|&v| v == 0.0));
    assert_eq!(store.grad(lin.bias.unwrap()).data(), &[1.0, 1.0]);
}

#[test]
fn f32_tape_rounds_outputs() {
    let mut g = Graph::new(Precision::F32);
    let x = g.constant(Tensor::scalar(1.0));
    let y = g.scale(x, 0.1);
    assert_eq!(g.item(y).unwrap(), 0.1f32 as f64);
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new(Precision::F32);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new(Precision::F32);
        let q = g.constant(Tensor::uniform(vec![4, 8], 1.0, &mut rng));
        let k = g.constant(Tensor::uniform(vec![6, 8], 1.0, &mut rng));
        let out = mha.forward(&mut g, &store, q, k, k).unwrap();
        g.value(out)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(
        vals in proptest::collection::vec(-50.0f64..50.0, 12),
        axis in 0usize..2,
    ) {
        let mut g = Graph::new(Precision::F32);
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x, axis).unwrap();
        let s = g.sum_axis(y, axis).unwrap();
        for v in g.value(s).data() {
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
        for v in g.value(y).data() {
            prop_assert!(*v >= 0.0 && *v <= 1.0);
        }
    }
}
