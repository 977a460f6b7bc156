//! Finite-difference checks for every differentiable op (64-bit).

use crossdtr_tensor::gradcheck::{check_inputs, check_params, GradCheckOptions};
use crossdtr_tensor::nn::{LayerNorm, Linear, MultiHeadAttention};
use crossdtr_tensor::{Graph, ParamStore, Precision, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PER_OP_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces `y` to a scalar with fixed pseudo-random weights so every output
/// coordinate contributes a distinct cotangent.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::uniform(shape, 1.0, &mut rng(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn assert_inputs<F>(label: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check_inputs(inputs, f, GradCheckOptions::default()).unwrap();
    assert!(report.checked > 0);
    assert!(
        report.max_rel_err < PER_OP_TOL,
        "{label}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn matmul_gradient_of_sum() {
    let mut r = rng(10);
    let a = Tensor::uniform(vec![4, 5], 1.0, &mut r);
    let b = Tensor::uniform(vec![5, 3], 1.0, &mut r);
    assert_inputs("matmul sum", &[a.clone(), b.clone()], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    });
    assert_inputs("matmul probe", &[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        probe(g, c, 1)
    });
}

#[test]
fn batched_matmul_with_broadcast() {
    let mut r = rng(11);
    let a = Tensor::uniform(vec![2, 3, 4], 1.0, &mut r);
    let b = Tensor::uniform(vec![4, 2], 1.0, &mut r);
    assert_inputs("bmm", &[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        probe(g, c, 2)
    });
}

#[test]
fn softmax_full_jacobian() {
    let x = Tensor::uniform(vec![6], 2.0, &mut rng(12));
    for out in 0..6 {
        assert_inputs("softmax", std::slice::from_ref(&x), |g, v| {
            let y = g.softmax(v[0], 0)?;
            let pick = g.narrow(y, 0, out, 1)?;
            Ok(g.sum(pick))
        });
    }
}

#[test]
fn softmax_and_log_softmax_inner_axis() {
    let x = Tensor::uniform(vec![2, 5, 3], 2.0, &mut rng(13));
    assert_inputs("softmax axis1", std::slice::from_ref(&x), |g, v| {
        let y = g.softmax(v[0], 1)?;
        probe(g, y, 3)
    });
    assert_inputs("log_softmax axis1", &[x], |g, v| {
        let y = g.log_softmax(v[0], 1)?;
        probe(g, y, 4)
    });
}

#[test]
fn conv2d_input_and_kernel() {
    let mut r = rng(14);
    let x = Tensor::uniform(vec![2, 2, 5, 6], 1.0, &mut r);
    let k = Tensor::uniform(vec![3, 2, 3, 3], 1.0, &mut r);
    assert_inputs("conv s1p1", &[x.clone(), k.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1)?;
        probe(g, y, 5)
    });
    assert_inputs("conv s2p1", &[x, k], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1)?;
        probe(g, y, 6)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = rng(15);
    let x = Tensor::uniform(vec![3, 6], 2.0, &mut r);
    let gain = Tensor::uniform(vec![6], 1.0, &mut r);
    let bias = Tensor::uniform(vec![6], 1.0, &mut r);
    assert_inputs("layer_norm", &[x, gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 7)
    });
}

#[test]
fn broadcast_binary_ops() {
    let mut r = rng(16);
    let a = Tensor::uniform(vec![3, 4], 1.0, &mut r);
    let b = Tensor::uniform(vec![4], 1.0, &mut r).map(|v| v + 2.0);
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)] {
        assert_inputs(name, &[a.clone(), b.clone()], |g, v| {
            let y = match op {
                0 => g.add(v[0], v[1])?,
                1 => g.sub(v[0], v[1])?,
                2 => g.mul(v[0], v[1])?,
                _ => g.div(v[0], v[1])?,
            };
            probe(g, y, 8)
        });
    }
}

#[test]
fn unary_ops() {
    let x = Tensor::uniform(vec![10], 2.0, &mut rng(17));
    let positive = x.map(|v| v.abs() + 0.2);
    let cases: Vec<(&str, Tensor, fn(&mut Graph, Var) -> Var)> = vec![
        ("exp", x.clone(), |g, v| g.exp(v)),
        ("log", positive.clone(), |g, v| g.log(v)),
        ("gelu", x.clone(), |g, v| g.gelu(v)),
        ("relu", x.clone(), |g, v| g.relu(v)),
        ("abs", x.clone(), |g, v| g.abs(v)),
        ("sigmoid", x.clone(), |g, v| g.sigmoid(v)),
        ("log_sigmoid", x.clone(), |g, v| g.log_sigmoid(v)),
        ("tanh", x.clone(), |g, v| g.tanh(v)),
        ("sin", x.clone(), |g, v| g.sin(v)),
        ("cos", x.clone(), |g, v| g.cos(v)),
        ("pow", positive.clone(), |g, v| g.powf(v, 2.5)),
        ("neg", x.clone(), |g, v| g.neg(v)),
        ("scale", x.clone(), |g, v| g.scale(v, -3.0)),
        ("add_scalar", x.clone(), |g, v| g.add_scalar(v, 1.5)),
    ];
    for (name, input, f) in cases {
        assert_inputs(name, &[input], |g, v| {
            let y = f(g, v[0]);
            probe(g, y, 9)
        });
    }
}

#[test]
fn layout_and_reduction_ops() {
    let mut r = rng(18);
    let x = Tensor::uniform(vec![2, 3, 4], 1.0, &mut r);
    let y = Tensor::uniform(vec![2, 2, 4], 1.0, &mut r);
    assert_inputs("permute", std::slice::from_ref(&x), |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        probe(g, p, 10)
    });
    assert_inputs("reshape", std::slice::from_ref(&x), |g, v| {
        let p = g.reshape(v[0], &[6, 4])?;
        probe(g, p, 11)
    });
    assert_inputs("concat", &[x.clone(), y], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        probe(g, c, 12)
    });
    assert_inputs("narrow", std::slice::from_ref(&x), |g, v| {
        let n = g.narrow(v[0], 2, 1, 2)?;
        probe(g, n, 13)
    });
    assert_inputs("select_rows", std::slice::from_ref(&x), |g, v| {
        let s = g.select_rows(v[0], &[1, 0, 1])?;
        probe(g, s, 14)
    });
    assert_inputs("sum_axis", std::slice::from_ref(&x), |g, v| {
        let s = g.sum_axis(v[0], 1)?;
        probe(g, s, 15)
    });
    assert_inputs("mean", &[x], |g, v| {
        let s = g.mean_axis(v[0], 0)?;
        let m = g.mean(s);
        let m2 = g.mul(m, m)?;
        Ok(g.sum(m2))
    });
}

#[test]
fn attention_all_parameters() {
    let mut r = rng(19);
    let mut store = ParamStore::new(Precision::F64);
    let mha = MultiHeadAttention::new(&mut store, "attn", 8, 2, &mut r).unwrap();
    for id in mha.params() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::uniform(shape, 0.5, &mut r);
    }
    let q = Tensor::uniform(vec![3, 8], 1.0, &mut r);
    let kv = Tensor::uniform(vec![5, 8], 1.0, &mut r);
    let report = check_params(
        &store,
        |g, s| {
            let qv = g.constant(q.clone());
            let kvv = g.constant(kv.clone());
            let y = mha.forward(g, s, qv, kvv, kvv)?;
            probe(g, y, 20)
        },
        None,
        0,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < PER_OP_TOL, "{report:?}");

    // and through the inputs
    assert_inputs("attention inputs", &[q, kv.clone(), kv], |g, v| {
        let y = mha.forward(g, &store, v[0], v[1], v[2])?;
        probe(g, y, 21)
    });
}

#[test]
fn composite_mlp() {
    let mut r = rng(20);
    let mut store = ParamStore::new(Precision::F64);
    let l1 = Linear::new(&mut store, "l1", 4, 8, true, &mut r).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 8).unwrap();
    let l2 = Linear::new(&mut store, "l2", 8, 3, true, &mut r).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        let t = Tensor::uniform(shape, 0.7, &mut r);
        *store.value_mut(id) = t;
    }
    let x = Tensor::uniform(vec![5, 4], 1.0, &mut r);
    let report = check_params(
        &store,
        |g, s| {
            let xv = g.constant(x.clone());
            let h = l1.forward(g, s, xv)?;
            let h = g.gelu(h);
            let h = ln.forward(g, s, h)?;
            let y = l2.forward(g, s, h)?;
            let y = g.log_softmax(y, 1)?;
            probe(g, y, 22)
        },
        None,
        0,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < PER_OP_TOL, "{report:?}");
}
