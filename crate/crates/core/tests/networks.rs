use fra_core::networks::{FraModel, Mlp, MlpSpec, ModelConfig, ModelPair, Mode};
use fra_core::FraError;
use fra_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        widths: [4, 8, 8, 16],
        embed_dim: 12,
        projector_hidden: 10,
        predictor_hidden: 10,
        num_queries: 3,
        decoder_heads: 2,
        decoder_ffn: 8,
        ..ModelConfig::default()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn default_encoder_output_shape() {
    let model = FraModel::new(&ModelConfig::default()).unwrap();
    let store = model.init_online::<f32>(&mut rng(0));
    let mut g = Graph::inference();
    let x = g.constant(Tensor::uniform([2, 3, 96, 96], 0.0, 1.0, &mut rng(1)));
    let out = model.encode(&mut g, &store, x, Mode::Eval).unwrap();
    assert_eq!(g.shape(out.feature_map), &[2, 128, 3, 3]);
    assert_eq!(g.shape(out.pooled), &[2, 128]);
}

#[test]
fn encoder_with_512_channels_has_stride_32() {
    let cfg = ModelConfig { widths: [64, 128, 256, 512], ..ModelConfig::default() };
    let model = FraModel::new(&cfg).unwrap();
    let store = model.init_online::<f32>(&mut rng(0));
    let mut g = Graph::inference();
    let x = g.constant(Tensor::uniform([2, 3, 96, 96], 0.0, 1.0, &mut rng(1)));
    let out = model.encode(&mut g, &store, x, Mode::Eval).unwrap();
    assert_eq!(g.shape(out.feature_map), &[2, 512, 3, 3]);
}

#[test]
fn pooled_is_spatial_mean() {
    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f64>(&mut rng(0));
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::uniform([3, 3, 64, 64], 0.0, 1.0, &mut rng(2)));
        let out = model.encode(&mut g, &store, x, mode).unwrap();
        let fm = g.value(out.feature_map);
        let (b, c, hw) = (fm.dim(0), fm.dim(1), fm.dim(2) * fm.dim(3));
        for i in 0..b * c {
            let mean: f64 = fm.data()[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
            let pooled = g.value(out.pooled).data()[i];
            assert!((mean - pooled).abs() <= 1e-5 * mean.abs().max(1.0));
        }
    }
}

#[test]
fn zero_input_gives_zero_feature_map() {
    // Convolutions are bias-free and normalization has zero shift at init.
    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f32>(&mut rng(0));
    for mode in [Mode::Train, Mode::Eval] {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros([2, 3, 64, 64]));
        let out = model.encode(&mut g, &store, x, mode).unwrap();
        assert!(g.value(out.feature_map).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn encode_rejects_bad_shapes() {
    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f32>(&mut rng(0));
    for shape in [vec![2, 1, 64, 64], vec![2, 3, 16, 16], vec![3, 64, 64]] {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(shape));
        assert!(matches!(model.encode(&mut g, &store, x, Mode::Eval), Err(FraError::Domain(_))));
    }
}

#[test]
fn project_global_examples() {
    let model = FraModel::new(&ModelConfig::default()).unwrap();
    let store = model.init_online::<f32>(&mut rng(0));
    let mut g = Graph::inference();
    let zero = g.constant(Tensor::zeros([4, 128]));
    let z = model.project_global(&mut g, &store, zero, Mode::Eval).unwrap();
    assert_eq!(g.shape(z), &[4, 256]);
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));

    let row = Tensor::<f32>::uniform([1, 128], -1.0, 1.0, &mut rng(3));
    let rows = Tensor::from_fn([5, 128], |i| row.data()[i % 128]);
    let x = g.constant(rows);
    for mode in [Mode::Eval, Mode::Train] {
        let z = model.project_global(&mut g, &store, x, mode).unwrap();
        let out = g.value(z);
        for r in 1..5 {
            assert_eq!(&out.data()[..256], &out.data()[r * 256..(r + 1) * 256]);
        }
    }

    let bad = g.constant(Tensor::full([2, 128], f32::NAN));
    assert!(matches!(model.project_global(&mut g, &store, bad, Mode::Eval), Err(FraError::Numeric(_))));
}

#[test]
fn project_dense_matches_per_pixel_projection() {
    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f64>(&mut rng(0));
    let fm = Tensor::<f64>::randn([2, 16, 3, 4], 1.0, &mut rng(5));
    let mut g = Graph::inference();
    let x = g.constant(fm.clone());
    let dense = model.project_dense(&mut g, &store, x, Mode::Eval).unwrap();
    let dense = g.value(dense).clone();
    assert_eq!(dense.shape(), &[2, 12, 3, 4]);
    for b in 0..2 {
        for u in 0..3 {
            for v in 0..4 {
                let pixel: Vec<f64> = (0..16).map(|c| fm.data()[((b * 16 + c) * 3 + u) * 4 + v]).collect();
                let mut g = Graph::inference();
                let p = g.constant(Tensor::new([1, 16], pixel));
                let out = model.project_local(&mut g, &store, p, Mode::Eval);
                for d in 0..12 {
                    let want = g.value(out).data()[d];
                    let got = dense.data()[((b * 12 + d) * 3 + u) * 4 + v];
                    assert!((want - got).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn project_dense_of_constant_map_is_constant() {
    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f64>(&mut rng(0));
    let pixel = Tensor::<f64>::randn([16], 1.0, &mut rng(6));
    let fm = Tensor::from_fn([1, 16, 3, 3], |i| pixel.data()[i / 9]);
    for mode in [Mode::Eval, Mode::Train] {
        let mut g = Graph::inference();
        let x = g.constant(fm.clone());
        let dense = model.project_dense(&mut g, &store, x, mode).unwrap();
        for ch in g.value(dense).data().chunks(9) {
            assert!(ch.iter().all(|&v| (v - ch[0]).abs() < 1e-12));
        }
    }
}

#[test]
fn project_dense_on_single_pixel_equals_project_local() {
    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f64>(&mut rng(0));
    let fm = Tensor::<f64>::randn([3, 16, 1, 1], 1.0, &mut rng(7));
    let mut g = Graph::inference();
    let x = g.constant(fm.clone());
    let dense = model.project_dense(&mut g, &store, x, Mode::Eval).unwrap();
    let flat = g.constant(fm.reshape([3, 16]));
    let local = model.project_local(&mut g, &store, flat, Mode::Eval);
    assert!(g.value(dense).clone().reshape([3, 12]).max_abs_diff(g.value(local)) < 1e-12);
}

#[test]
fn predictor_examples() {
    let spec = MlpSpec { input_dim: 6, hidden_dim: 6, output_dim: 6, num_layers: 1, batch_norm: false };
    let mlp = Mlp::new("pred", spec);
    let mut store = ParamStore::<f64>::new("online");
    mlp.init(&mut store, &mut rng(0));
    mlp.set_identity(&mut store);
    let x = Tensor::<f64>::randn([4, 6], 1.0, &mut rng(1));
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = mlp.forward(&mut g, &store, xv, Mode::Train);
    assert_eq!(g.value(y), &x);

    let model = FraModel::new(&small_config()).unwrap();
    let store = model.init_online::<f64>(&mut rng(0));
    for b in [1, 3, 7] {
        let zero = g.constant(Tensor::zeros([b, 12]));
        let p = model.predict_global(&mut g, &store, zero, Mode::Eval);
        assert_eq!(g.shape(p), &[b, 12]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
        let q = model.predict_local(&mut g, &store, zero, Mode::Eval);
        assert_eq!(g.shape(q), &[b, 12]);
    }
}

fn filled_pair(online: f32, momentum: f32) -> ModelPair<f32> {
    let model = FraModel::new(&small_config()).unwrap();
    let mut pair = model.init_pair::<f32>(&mut rng(0));
    for (_, t) in pair.online.params_mut() {
        t.data_mut().fill(online);
    }
    for (_, t) in pair.momentum.params_mut() {
        t.data_mut().fill(momentum);
    }
    pair
}

#[test]
fn ema_examples() {
    let mut pair = filled_pair(2.0, 0.0);
    pair.ema_update(0.75).unwrap();
    for (_, t) in pair.momentum.params() {
        assert!(t.data().iter().all(|&v| v == 0.5));
    }

    let model = FraModel::new(&small_config()).unwrap();
    let mut pair = model.init_pair::<f32>(&mut rng(0));
    for (_, t) in pair.online.params_mut() {
        for v in t.data_mut() {
            *v += 1.0;
        }
    }
    let before = pair.momentum.clone();
    pair.ema_update(1.0).unwrap();
    assert_eq!(pair.momentum, before);
    pair.ema_update(0.0).unwrap();
    for (name, t) in pair.momentum.params() {
        assert_eq!(t, pair.online.expect(name));
    }
    assert!(pair.momentum.param_names().all(|n| !FraModel::is_predictor(n)));
    assert!(pair.online.param_names().any(|n| FraModel::is_predictor(n)));
}

#[test]
fn ema_rejects_bad_momentum_and_topology() {
    let mut pair = filled_pair(1.0, 0.0);
    assert!(matches!(pair.ema_update(1.5), Err(FraError::Domain(_))));
    assert!(matches!(pair.ema_update(-0.1), Err(FraError::Domain(_))));
    let name = pair.momentum.param_names().next().unwrap().clone();
    *pair.momentum.get_mut(&name).unwrap() = Tensor::zeros([1]);
    assert!(matches!(pair.ema_update(0.5), Err(FraError::Topology(_))));
}

#[test]
fn check_against_detects_other_configs() {
    let model = FraModel::new(&small_config()).unwrap();
    let pair = model.init_pair::<f32>(&mut rng(3));
    pair.check_against(&model).unwrap();
    let other = FraModel::new(&ModelConfig { num_queries: 4, ..small_config() }).unwrap();
    assert!(matches!(pair.check_against(&other), Err(FraError::Topology(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    // Momentum values stay inside the envelope of their start value and every
    // online value seen so far.
    #[test]
    fn ema_stays_in_envelope(taus in proptest::collection::vec(0.01f64..0.99, 1..8), seed in any::<u64>()) {
        let model = FraModel::new(&small_config()).unwrap();
        let mut pair = model.init_pair::<f64>(&mut rng(seed));
        let name = "proj_global.0.weight";
        let start = pair.momentum.expect(name).clone();
        let mut lo = start.clone();
        let mut hi = start;
        let mut r = rng(seed ^ 1);
        for tau in taus {
            let step = Tensor::<f64>::randn(pair.online.expect(name).shape().to_vec(), 1.0, &mut r);
            let next = pair.online.expect(name).zip_map(&step, |a, b| a + b);
            *pair.online.get_mut(name).unwrap() = next.clone();
            lo = lo.zip_map(&next, f64::min);
            hi = hi.zip_map(&next, f64::max);
            pair.ema_update(tau).unwrap();
            let m = pair.momentum.expect(name);
            for ((&v, &a), &b) in m.data().iter().zip(lo.data()).zip(hi.data()) {
                prop_assert!(v >= a - 1e-12 && v <= b + 1e-12);
            }
        }
    }
}
