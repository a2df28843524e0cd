use fra_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

/// Projects the op output onto a fixed random direction so every output
/// element contributes to the scalar being differentiated.
fn scalarize(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(out).to_vec(), 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w);
    g.sum_all(p)
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut store = ParamStore::new("p");
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("x{i}"), t.clone());
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(&store, &format!("x{i}"))).collect();
    let out = build(&mut g, &vars);
    let s = scalarize(&mut g, out, 99);
    g.value(s).item()
}

fn check(name: &str, inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut store = ParamStore::new("p");
    for (i, t) in inputs.iter().enumerate() {
        store.insert(format!("x{i}"), t.clone());
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(&store, &format!("x{i}"))).collect();
    let out = build(&mut g, &vars);
    let s = scalarize(&mut g, out, 99);
    let grads = g.backward(s);
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-5, "{name}: input {i} elem {j}: analytic {a} vs fd {fd}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand(shape, seed).map(|v| v.abs() + 0.5)
}

#[test]
fn elementwise_ops() {
    check("add", vec![rand(&[3, 4], 1), rand(&[3, 4], 2)], &|g, v| g.add(v[0], v[1]));
    check("sub", vec![rand(&[3, 4], 1), rand(&[3, 4], 2)], &|g, v| g.sub(v[0], v[1]));
    check("mul", vec![rand(&[3, 4], 1), rand(&[3, 4], 2)], &|g, v| g.mul(v[0], v[1]));
    check("div", vec![rand(&[3, 4], 1), positive(&[3, 4], 2)], &|g, v| g.div(v[0], v[1]));
    check("affine", vec![rand(&[5], 1)], &|g, v| g.affine(v[0], -2.5, 0.3));
    check("exp", vec![rand(&[5], 3)], &|g, v| g.exp(v[0]));
    check("log", vec![positive(&[5], 3)], &|g, v| g.log_clamp(v[0], 1e-12));
    check("relu", vec![rand(&[7], 4)], &|g, v| g.relu(v[0]));
}

#[test]
fn broadcast_ops() {
    check("add_suffix", vec![rand(&[2, 3, 4], 1), rand(&[3, 4], 2)], &|g, v| g.add_suffix(v[0], v[1]));
    check("mul_suffix", vec![rand(&[2, 3, 4], 1), rand(&[4], 2)], &|g, v| g.mul_suffix(v[0], v[1]));
    check("mul_prefix", vec![rand(&[2, 3, 4], 1), rand(&[2, 3], 2)], &|g, v| g.mul_prefix(v[0], v[1]));
    check("expand", vec![rand(&[3, 4], 1)], &|g, v| g.expand_axis(v[0], 1, 2));
}

#[test]
fn reductions_and_shapes() {
    check("sum_all", vec![rand(&[3, 4], 1)], &|g, v| g.sum_all(v[0]));
    check("mean_axis", vec![rand(&[2, 3, 4], 1)], &|g, v| g.mean_axis(v[0], 1));
    check("reshape", vec![rand(&[2, 6], 1)], &|g, v| g.reshape(v[0], &[3, 4]));
    check("permute", vec![rand(&[2, 3, 4], 1)], &|g, v| g.permute(v[0], &[2, 0, 1]));
    check("narrow", vec![rand(&[2, 5, 3], 1)], &|g, v| g.narrow(v[0], 1, 1, 3));
    check("concat", vec![rand(&[2, 2, 3], 1), rand(&[2, 1, 3], 2)], &|g, v| g.concat(&[v[0], v[1]], 1));
}

#[test]
fn matrix_ops() {
    check("linear", vec![rand(&[2, 3, 4], 1), rand(&[5, 4], 2), rand(&[5], 3)], &|g, v| {
        g.linear(v[0], v[1], Some(v[2]))
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand(&[2, 4, 3], 1) } else { rand(&[2, 3, 4], 1) };
        let b = if tb { rand(&[2, 5, 4], 2) } else { rand(&[2, 4, 5], 2) };
        check("bmm", vec![a, b], &move |g, v| g.bmm(v[0], v[1], ta, tb));
    }
}

#[test]
fn normalizations() {
    check("softmax", vec![rand(&[3, 5], 1)], &|g, v| g.softmax(v[0]));
    check("l2_normalize", vec![rand(&[3, 5], 1)], &|g, v| g.l2_normalize(v[0], 1e-8));
    check("cosine", vec![rand(&[3, 5], 1), rand(&[3, 5], 2)], &|g, v| g.cosine(v[0], v[1], 1e-8));
    check("layer_norm", vec![rand(&[3, 6], 1), rand(&[6], 2), rand(&[6], 3)], &|g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check("batch_norm_2d", vec![rand(&[5, 3], 1), rand(&[3], 2), rand(&[3], 3)], &|g, v| {
        g.batch_norm(v[0], v[1], v[2], None, 1e-5).0
    });
    check("batch_norm_4d", vec![rand(&[2, 3, 2, 2], 1), rand(&[3], 2), rand(&[3], 3)], &|g, v| {
        g.batch_norm(v[0], v[1], v[2], None, 1e-5).0
    });
    let rm = rand(&[3], 7);
    let rv = positive(&[3], 8);
    check("batch_norm_eval", vec![rand(&[4, 3], 1), rand(&[3], 2), rand(&[3], 3)], &move |g, v| {
        g.batch_norm(v[0], v[1], v[2], Some((&rm, &rv)), 1e-5).0
    });
}

#[test]
fn spatial_ops() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 1)] {
        check("conv2d", vec![rand(&[2, 3, 5, 5], 1), rand(&[4, 3, k, k], 2)], &move |g, v| {
            g.conv2d(v[0], v[1], stride, pad)
        });
    }
    check("max_pool", vec![rand(&[2, 2, 5, 5], 1)], &|g, v| g.max_pool2d(v[0], 3, 2, 1));
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut store = ParamStore::<f64>::new("s");
    store.insert("w", Tensor::new([2], vec![1.5, -2.0]));
    let mut g = Graph::new();
    let a = g.param(&store, "w");
    let b = g.param(&store, "w");
    assert_eq!(a, b);
    let p = g.mul(a, b);
    let s = g.sum_all(p);
    let grads = g.backward(s);
    assert_eq!(grads.param("s", "w").unwrap().data(), &[3.0, -4.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut store = ParamStore::<f64>::new("s");
    store.insert("w", Tensor::new([2], vec![1.0, 2.0]));
    let mut g = Graph::new();
    let w = g.param(&store, "w");
    let d = g.detach(w);
    let p = g.mul(w, d);
    let s = g.sum_all(p);
    let grads = g.backward(s);
    assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
    assert!(grads.get(d).is_none());
}
