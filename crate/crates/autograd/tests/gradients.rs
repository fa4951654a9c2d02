use bootplace_autograd::init::uniform;
use bootplace_autograd::nn::{attend, MultiHeadAttention};
use bootplace_autograd::{grad_check, grad_check_params, ConvSpec, Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum so every output element carries a distinct upstream gradient.
fn reduce(g: &mut Graph<f64>, y: Var, seed: u64) -> bootplace_autograd::Result<Var> {
    let w = g.constant(rand_t(g.shape(y).to_vec(), seed ^ 0xabc));
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn check(name: &str, inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> bootplace_autograd::Result<Var>) {
    let report = grad_check(
        |g, v| {
            let y = f(g, v)?;
            reduce(g, y, 17)
        },
        inputs,
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{name}: {report:?}");
}

#[test]
fn elementwise_primitives() {
    let a = rand_t(vec![3, 4], 1);
    let b = rand_t(vec![3, 4], 2);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("minimum", &[a.clone(), b.clone()], |g, v| g.minimum(v[0], v[1]));
    check("maximum", &[a.clone(), b.clone()], |g, v| g.maximum(v[0], v[1]));
    let pos = Tensor::new(vec![3, 4], b.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    check("div", &[a.clone(), pos.clone()], |g, v| g.div(v[0], v[1]));
    check("log", &[pos.clone()], |g, v| Ok(g.log(v[0])));
    check("exp", &[a.clone()], |g, v| Ok(g.exp(v[0])));
    check("abs", &[a.clone()], |g, v| Ok(g.abs(v[0])));
    check("relu", &[a.clone()], |g, v| Ok(g.relu(v[0])));
    check("gelu", &[a.clone()], |g, v| Ok(g.gelu(v[0])));
    check("sigmoid", &[a.clone()], |g, v| Ok(g.sigmoid(v[0])));
    check("scale", &[a.clone()], |g, v| Ok(g.scale(v[0], -2.5)));
    check("add_scalar", &[a.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("clamp_min", &[a.clone()], |g, v| Ok(g.clamp_min(v[0], 0.1)));
    let r = rand_t(vec![4], 3);
    check("add_row", &[a.clone(), r.clone()], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", &[a, r], |g, v| g.mul_row(v[0], v[1]));
}

#[test]
fn matrix_primitives() {
    let a = rand_t(vec![3, 5], 4);
    let b = rand_t(vec![5, 2], 5);
    let c = rand_t(vec![4, 5], 6);
    check("matmul", &[a.clone(), b], |g, v| g.matmul(v[0], v[1]));
    check("matmul_nt", &[a.clone(), c.clone()], |g, v| g.matmul_nt(v[0], v[1]));
    check("transpose", &[a.clone()], |g, v| g.transpose(v[0]));
    check("slice_cols", &[a.clone()], |g, v| g.slice_cols(v[0], 1, 3));
    check("concat_cols", &[a.clone(), rand_t(vec![3, 2], 7)], |g, v| g.concat_cols(&[v[0], v[1]]));
    check("concat_rows", &[a.clone(), c], |g, v| g.concat_rows(&[v[0], v[1]]));
    check("select", &[a.clone()], |g, v| g.select(v[0], &[0, 4, 4, 14]));
    check("select_rows", &[a.clone()], |g, v| g.select_rows(v[0], &[2, 0]));
    check("reshape", &[a.clone()], |g, v| g.reshape(v[0], vec![5, 3]));
    check("sum_axis0", &[a.clone()], |g, v| g.sum_axis(v[0], 0));
    check("sum_axis1", &[a.clone()], |g, v| g.sum_axis(v[0], 1));
    check("mean", &[a.clone()], |g, v| Ok(g.mean(v[0])));
    check("sum", &[a], |g, v| Ok(g.sum(v[0])));
}

#[test]
fn normalization_primitives() {
    let a = rand_t(vec![2, 3, 4], 8);
    for axis in 0..3 {
        check("softmax", &[a.clone()], |g, v| g.softmax(v[0], axis));
        check("log_softmax", &[a.clone()], |g, v| g.log_softmax(v[0], axis));
        check("layer_norm", &[a.clone()], |g, v| g.layer_norm(v[0], axis, 1e-5));
        check("l2_normalize", &[a.clone()], |g, v| g.l2_normalize(v[0], axis, 1e-12));
    }
}

#[test]
fn softmax_log_composite() {
    let a = rand_t(vec![3, 6], 9);
    let report = grad_check(
        |g, v| {
            let p = g.softmax(v[0], 1)?;
            let l = g.log(p);
            let picked = g.select(l, &[1, 8, 17])?;
            Ok(g.sum(picked))
        },
        &[a],
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn convolution() {
    let x = rand_t(vec![2, 7, 6], 10);
    let w = rand_t(vec![3, 2, 3, 3], 11);
    let b = rand_t(vec![3], 12);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
        check("conv2d", &[x.clone(), w.clone(), b.clone()], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride, padding })
        });
    }
}

#[test]
fn dropout_with_fixed_mask() {
    // A training graph with a fixed seed reproduces the same mask on every
    // evaluation, so finite differences see a fixed linear map.
    let x = rand_t(vec![4, 4], 13);
    let f = |g: &mut Graph<f64>, v: Var| -> bootplace_autograd::Result<Var> {
        let y = g.dropout(v, 0.3)?;
        reduce(g, y, 5)
    };
    let numeric: Vec<f64> = (0..16)
        .map(|j| {
            let eval = |delta: f64| {
                let mut t = x.clone();
                t.data_mut()[j] += delta;
                let mut g = Graph::new(true, 99);
                let v = g.constant(t);
                let out = f(&mut g, v).unwrap();
                g.scalar_value(out)
            };
            (eval(EPS) - eval(-EPS)) / (2.0 * EPS)
        })
        .collect();
    let mut g = Graph::new(true, 99);
    let v = g.variable(x.clone());
    let out = f(&mut g, v).unwrap();
    let grads = g.backward(out).unwrap();
    for (a, n) in grads.get(v).unwrap().iter().zip(&numeric) {
        assert!(bootplace_autograd::gradcheck::relative_error(*a, *n) < TOL);
    }
}

#[test]
fn attention_layer_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
    let q = rand_t(vec![3, 8], 15);
    let kv = rand_t(vec![5, 8], 16);
    let report = grad_check_params(
        &store,
        |g, p| {
            let q = g.constant(q.clone());
            let kv = g.constant(kv.clone());
            let out = mha.forward(g, p, q, kv, kv)?;
            reduce(g, out.output, 3)
        },
        EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    check("attend", &[q, kv.clone(), kv], |g, v| Ok(attend(g, v[0], v[1], v[2], 4)?.output));
}

proptest! {
    #[test]
    fn softmax_is_a_strictly_positive_simplex(values in prop::collection::vec(-30.0f64..30.0, 1..24)) {
        let n = values.len();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::new(vec![n], values).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let p = g.value(y).data();
        prop_assert!(p.iter().all(|&v| v > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
