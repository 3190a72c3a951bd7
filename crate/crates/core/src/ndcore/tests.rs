use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Result;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| 0.3 + 0.1 * k as f64).collect();
    let w = g.constant(Tensor::from_f64(&shape, &w)?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn assert_grad(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let r = check_gradients(inputs, STEP, f).unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn forward_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::scalar(-1.0));
    let y = g.leaky_relu(x, LEAKY_SLOPE);
    assert!((g.value(y).data()[0] + 0.01).abs() < 1e-15);

    let z = g.constant(Tensor::zeros(&[1, 3]));
    let s = g.softmax_rows(z);
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let a = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
    let i = g.constant(Tensor::eye(2));
    let p = g.matmul(a, i).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 3]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4, 3]"), "{msg}");
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul"), "{msg}");
}

#[test]
fn square_derivative() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let y = g.square(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_and_non_finite() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]), true);
    assert!(g.backward(x).is_err());
    let l = g.log(x);
    let s = g.sum(l);
    assert!(g.backward(s).is_err());
}

#[test]
fn unreachable_leaves_get_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let unused = g.leaf(Tensor::zeros(&[3]), true);
    let y = g.exp(x);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
}

#[test]
fn matmul_sum_gradient_is_transposed_partner() {
    let a = random(&[3, 4], -2.0, 2.0, 1);
    let b = random(&[4, 2], -2.0, 2.0, 2);
    let mut g = Graph::new();
    let va = g.leaf(a.clone(), true);
    let vb = g.constant(b.clone());
    let p = g.matmul(va, vb).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    // d/dA Σ(AB) = 1 Bᵀ: row i equals the row sums of B
    let expected: Vec<f64> = (0..4).map(|k| b.row(k).iter().sum()).collect();
    for i in 0..3 {
        for k in 0..4 {
            assert!((grads.get(va).unwrap().at(i, k) - expected[k]).abs() < 1e-12);
        }
    }
    assert_grad(&[a, b], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum(p))
    });
}

#[test]
fn elementwise_binary_ops_with_broadcasting() {
    let shapes: [(&[usize], &[usize]); 4] = [(&[3, 4], &[3, 4]), (&[3, 4], &[1, 4]), (&[3, 1], &[1, 4]), (&[3, 4], &[4])];
    for (s, (sa, sb)) in shapes.iter().enumerate() {
        let a = random(sa, -2.0, 2.0, 10 + s as u64);
        let b = random(sb, 0.5, 2.0, 20 + s as u64);
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let r = g.add(v[0], v[1])?;
            weighted_sum(g, r)
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let r = g.sub(v[0], v[1])?;
            weighted_sum(g, r)
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let r = g.mul(v[0], v[1])?;
            weighted_sum(g, r)
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let r = g.div(v[0], v[1])?;
            weighted_sum(g, r)
        });
    }
}

#[test]
fn unary_ops() {
    let x = random(&[3, 5], -2.0, 2.0, 3);
    let pos = random(&[3, 5], 0.3, 2.0, 4);
    type Unary = fn(&mut Graph<f64>, Var) -> Var;
    let real: [(&str, Unary); 9] = [
        ("neg", |g, v| g.neg(v)),
        ("scale", |g, v| g.scale(v, -1.7)),
        ("add_scalar", |g, v| g.add_scalar(v, 0.4)),
        ("exp", |g, v| g.exp(v)),
        ("sigmoid", |g, v| g.sigmoid(v)),
        ("softplus", |g, v| g.softplus(v)),
        ("log_sigmoid", |g, v| g.log_sigmoid(v)),
        ("leaky_relu", |g, v| g.leaky_relu(v, LEAKY_SLOPE)),
        ("square", |g, v| g.square(v)),
    ];
    for (name, op) in real {
        let r = check_gradients(std::slice::from_ref(&x), STEP, |g, v| {
            let y = op(g, v[0]);
            weighted_sum(g, y)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{name}: {r:?}");
    }
    let positive: [(&str, Unary); 3] = [
        ("log", |g, v| g.log(v)),
        ("sqrt", |g, v| g.sqrt(v)),
        ("ln_gamma", |g, v| g.ln_gamma(v)),
    ];
    for (name, op) in positive {
        let r = check_gradients(std::slice::from_ref(&pos), STEP, |g, v| {
            let y = op(g, v[0]);
            weighted_sum(g, y)
        })
        .unwrap();
        assert!(r.max_rel_err < TOL, "{name}: {r:?}");
    }
}

#[test]
fn reductions_and_reshaping_ops() {
    let x = random(&[4, 6], -2.0, 2.0, 5);
    let y = random(&[4, 2], -2.0, 2.0, 6);
    assert_grad(std::slice::from_ref(&x), |g, v| {
        let s = g.softmax_rows(v[0]);
        weighted_sum(g, s)
    });
    assert_grad(std::slice::from_ref(&x), |g, v| {
        let s = g.sum_rows(v[0]);
        weighted_sum(g, s)
    });
    assert_grad(std::slice::from_ref(&x), |g, v| {
        let s = g.sum_cols(v[0]);
        weighted_sum(g, s)
    });
    assert_grad(std::slice::from_ref(&x), |g, v| {
        let s = g.square(v[0]);
        Ok(g.mean(s))
    });
    assert_grad(&[x.clone(), y.clone()], |g, v| {
        let s = g.hcat(&[v[0], v[1], v[0]])?;
        weighted_sum(g, s)
    });
    assert_grad(&[x], |g, v| {
        let s = g.slice_cols(v[0], 2, 5)?;
        weighted_sum(g, s)
    });
}

#[test]
fn neg_binomial_op_gradients() {
    let counts = Tensor::from_f64(&[2, 3], &[0., 3., 7., 1., 0., 120.]).unwrap();
    let mu = random(&[2, 3], 0.5, 10.0, 7);
    let theta = random(&[1, 3], 0.3, 5.0, 8);
    assert_grad(&[mu, theta], |g, v| {
        let lp = g.neg_binomial_log_prob(&counts, v[0], v[1])?;
        weighted_sum(g, lp)
    });
}

#[test]
fn straight_through_routes_gradient_to_relaxed() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap(), true);
    let r = g.sigmoid(x);
    let st = g.straight_through(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap(), r).unwrap();
    assert_eq!(g.value(st).data(), &[1.0, 0.0]);
    let s = g.sum(st);
    let grads = g.backward(s).unwrap();
    let expect: Vec<f64> = [0.3f64, -0.2].iter().map(|&v| sigmoid(v) * (1.0 - sigmoid(v))).collect();
    assert_eq!(grads.get(x).unwrap().data(), expect.as_slice());
}

#[test]
fn residual_mlp_contract() {
    let (store, net) = build_residual_mlp::<f64>(5, &[400], 10, 3).unwrap();
    let x = random(&[3, 5], -1.0, 1.0, 9);
    let y = net.apply(&store, &x).unwrap();
    assert_eq!(y.shape(), &[3, 10]);

    let (again, _) = build_residual_mlp::<f64>(5, &[400], 10, 3).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id), again.get(id));
    }

    let (mut zeroed, net) = build_residual_mlp::<f64>(4, &[8, 8], 3, 1).unwrap();
    net.zero_output_layer(&mut zeroed);
    let out = net.apply(&zeroed, &Tensor::zeros(&[2, 4])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));

    let (s, linear) = build_residual_mlp::<f64>(4, &[], 2, 1).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(linear.apply(&s, &Tensor::zeros(&[1, 4])).unwrap().shape(), &[1, 2]);
    assert!(build_residual_mlp::<f64>(0, &[3], 2, 1).is_err());
}

#[test]
fn residual_mlp_gradients_match_finite_differences() {
    let (store, net) = build_residual_mlp::<f64>(3, &[6, 6], 2, 11).unwrap();
    let x = random(&[4, 3], -2.0, 2.0, 12);
    let mut inputs: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
    inputs.push(x);
    let ids: Vec<ParamId> = store.ids().collect();
    let r = check_gradients(&inputs, STEP, |g, v| {
        let bound = Bound::from_vars(v[..ids.len()].to_vec());
        let y = net.forward(g, &bound, v[ids.len()])?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < TOL, "{r:?}");
}

#[test]
fn residual_shortcut_only_between_equal_hidden_widths() {
    // with all weights zeroed the residual path is the only way signal
    // survives, which never happens for the first (in→hidden) layer
    let (mut store, net) = build_residual_mlp::<f64>(4, &[4, 4], 4, 2).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let out = net.apply(&store, &Tensor::ones(&[1, 4])).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn orthogonal_init_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sq = orthogonal_matrix(20, 20, &mut rng);
    let err = sq.transpose().matmul(&sq).unwrap().frobenius_distance(&Tensor::eye(20)).unwrap();
    assert!(err < 1e-6, "{err}");

    let tall = orthogonal_matrix(50, 20, &mut rng);
    let err = tall.transpose().matmul(&tall).unwrap().frobenius_distance(&Tensor::eye(20)).unwrap();
    assert!(err < 1e-6, "{err}");

    let wide = orthogonal_matrix(15, 20, &mut rng);
    let err = wide.matmul(&wide.transpose()).unwrap().frobenius_distance(&Tensor::eye(15)).unwrap();
    assert!(err < 1e-6, "{err}");

    let (mut store, net) = build_residual_mlp::<f64>(20, &[20], 20, 0).unwrap();
    net.orthogonal_init(&mut store, 1);
    let w1: Vec<Tensor<f64>> = net.weight_ids().map(|id| store.get(id).clone()).collect();
    net.orthogonal_init(&mut store, 2);
    let w2: Vec<Tensor<f64>> = net.weight_ids().map(|id| store.get(id).clone()).collect();
    for (a, b) in w1.iter().zip(&w2) {
        assert!(a.frobenius_distance(b).unwrap() > 0.0);
        let err = a.transpose().matmul(a).unwrap().frobenius_distance(&Tensor::eye(20)).unwrap();
        assert!(err < 1e-6);
    }
}

#[test]
fn f32_graph_agrees_with_f64() {
    let x64 = random(&[2, 3], -2.0, 2.0, 13);
    let x32: Tensor<f32> = x64.cast();
    fn run<S: Scalar>(x: Tensor<S>) -> (S, Vec<S>) {
        let mut g = Graph::<S>::new();
        let v = g.leaf(x, true);
        let s = g.softmax_rows(v);
        let l = g.log(s);
        let t = g.sum(l);
        let grads = g.backward(t).unwrap();
        (g.value(t).data()[0], grads.get(v).unwrap().data().to_vec())
    }
    let (a, ga) = run(x64);
    let (b, gb) = run(x32);
    assert!((a - b as f64).abs() < 1e-4);
    for (p, q) in ga.iter().zip(gb) {
        assert!((p - q as f64).abs() < 1e-4);
    }
}

#[test]
fn forward_is_deterministic() {
    let (store, net) = build_residual_mlp::<f64>(3, &[5, 5], 2, 4).unwrap();
    let x = random(&[6, 3], -2.0, 2.0, 14);
    assert_eq!(net.apply(&store, &x).unwrap(), net.apply(&store, &x).unwrap());
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn broadcast_mul_div_gradients(seed in 0u64..10_000, rows in 1usize..4, cols in 1usize..5) {
            let a = random(&[rows, cols], -2.0, 2.0, seed);
            let b = random(&[1, cols], 0.5, 2.0, seed + 1);
            let r = check_gradients(&[a, b], STEP, |g, v| {
                let p = g.mul(v[0], v[1])?;
                let q = g.div(p, v[1])?;
                let q = g.mul(q, v[1])?;
                weighted_sum(g, q)
            }).unwrap();
            prop_assert!(r.max_rel_err < TOL, "{:?}", r);
        }
    }
}
