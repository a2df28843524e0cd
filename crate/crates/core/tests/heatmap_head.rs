use fra_core::heatmap_head::{compute_assignments, pool_regions, DecoderHead, HeadSpec};
use fra_core::networks::{FraModel, ModelConfig, Mode};
use fra_core::FraError;
use fra_tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn head(num_queries: usize, d: usize) -> DecoderHead {
    DecoderHead::new(HeadSpec {
        in_channels: 6,
        num_queries,
        d_model: d,
        out_dim: d,
        depth: 2,
        heads: 2,
        ffn_dim: 16,
    })
}

fn run_head(h: &DecoderHead, st: &ParamStore<f64>, fm: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference();
    let x = g.constant(fm.clone());
    let out = h.forward(&mut g, st, x).unwrap();
    g.value(out).clone()
}

#[test]
fn identical_queries_give_identical_embeddings() {
    let h = head(3, 8);
    let mut st = ParamStore::<f64>::new("online");
    h.init(&mut st, &mut rng(0));
    let q = st.get_mut(h.queries_name()).unwrap();
    let first: Vec<f64> = q.data()[..8].to_vec();
    q.data_mut()[8..16].copy_from_slice(&first);
    let out = run_head(&h, &st, &Tensor::randn([2, 6, 3, 3], 1.0, &mut rng(1)));
    for b in 0..2 {
        let row = |m: usize| &out.data()[(b * 3 + m) * 8..(b * 3 + m + 1) * 8];
        assert!(row(0).iter().zip(row(1)).all(|(a, c)| (a - c).abs() < 1e-12));
        assert!(row(0).iter().zip(row(2)).any(|(a, c)| (a - c).abs() > 1e-6));
    }
}

#[test]
fn permuting_queries_permutes_embeddings() {
    let h = head(4, 8);
    let mut st = ParamStore::<f64>::new("online");
    h.init(&mut st, &mut rng(0));
    let fm = Tensor::randn([2, 6, 2, 3], 1.0, &mut rng(1));
    let base = run_head(&h, &st, &fm);
    let perm = [2, 0, 3, 1];
    let q = st.expect(h.queries_name()).clone();
    let permuted = Tensor::from_fn([4, 8], |i| q.data()[perm[i / 8] * 8 + i % 8]);
    *st.get_mut(h.queries_name()).unwrap() = permuted;
    let out = run_head(&h, &st, &fm);
    for b in 0..2 {
        for (m, &src) in perm.iter().enumerate() {
            for d in 0..8 {
                let a = out.data()[(b * 4 + m) * 8 + d];
                let c = base.data()[(b * 4 + src) * 8 + d];
                assert!((a - c).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn default_head_output_shape() {
    let model = FraModel::new(&ModelConfig::default()).unwrap();
    let st = model.init_online::<f32>(&mut rng(0));
    let mut g = Graph::inference();
    let fm = g.constant(Tensor::randn([1, 128, 3, 3], 1.0, &mut rng(1)));
    let q = model.mask_embeddings(&mut g, &st, fm).unwrap();
    assert_eq!(g.shape(q), &[1, 8, 256]);
}

#[test]
fn empty_feature_map_is_rejected() {
    let h = head(2, 8);
    let mut st = ParamStore::<f64>::new("online");
    h.init(&mut st, &mut rng(0));
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros([1, 6, 0, 3]));
    assert!(matches!(h.forward(&mut g, &st, x), Err(FraError::Domain(_))));
}

#[test]
fn assignment_closed_form_two_regions() {
    // Pixel equals region 0 and is orthogonal to region 1.
    let dense = Tensor::new([1, 2, 1, 1], vec![1.0f64, 0.0]);
    let masks = Tensor::new([1, 2, 2], vec![1.0f64, 0.0, 0.0, 1.0]);
    let a = compute_assignments(&dense, &masks, 1.0).unwrap();
    assert!((a.s.data()[0] - 1.0).abs() < 1e-7 && a.s.data()[1].abs() < 1e-12);
    let e = std::f64::consts::E;
    assert!((a.m.data()[0] - e / (e + 1.0)).abs() < 1e-7);
    assert!((a.m.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-7);
    assert!((a.m.data()[0] - 0.731).abs() < 1e-3);
}

#[test]
fn identical_masks_give_uniform_heatmaps() {
    let dense = Tensor::<f64>::randn([2, 5, 3, 3], 1.0, &mut rng(2));
    let row = Tensor::<f64>::randn([5], 1.0, &mut rng(3));
    let masks = Tensor::from_fn([2, 4, 5], |i| row.data()[i % 5]);
    let a = compute_assignments(&dense, &masks, 0.1).unwrap();
    assert!(a.m.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn anti_parallel_pixel_has_cosine_minus_one() {
    let dense = Tensor::new([1, 3, 1, 1], vec![1.0f64, -2.0, 0.5]);
    let masks = Tensor::new([1, 1, 3], vec![-2.0f64, 4.0, -1.0]);
    let a = compute_assignments(&dense, &masks, 0.1).unwrap();
    assert!((a.s.data()[0] + 1.0).abs() < 1e-7);
}

#[test]
fn zero_vectors_stay_finite() {
    let dense = Tensor::<f64>::zeros([1, 4, 2, 2]);
    let masks = Tensor::new([1, 2, 4], vec![0.0f64, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    let a = compute_assignments(&dense, &masks, 0.1).unwrap();
    assert!(a.s.all_finite() && a.m.all_finite());
    assert!(a.s.data().iter().all(|&v| v == 0.0));
}

#[test]
fn pooling_examples() {
    let fm = Tensor::<f64>::randn([2, 3, 2, 2], 1.0, &mut rng(4));
    let uniform = Tensor::full([2, 1, 2, 2], 0.25);
    let pooled = pool_regions(&fm, &uniform).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            let mean = fm.data()[(b * 3 + c) * 4..(b * 3 + c + 1) * 4].iter().sum::<f64>() / 4.0;
            assert!((pooled.data()[b * 3 + c] - mean).abs() < 1e-7);
        }
    }

    let mut onehot = vec![0.0f64; 8];
    onehot[2] = 1.0;
    onehot[4 + 2] = 1.0;
    let pooled = pool_regions(&fm, &Tensor::new([2, 1, 2, 2], onehot)).unwrap();
    for b in 0..2 {
        for c in 0..3 {
            assert!((pooled.data()[b * 3 + c] - fm.data()[(b * 3 + c) * 4 + 2]).abs() < 1e-7);
        }
    }
}

#[test]
fn pooling_matches_loop_oracle() {
    let fm = Tensor::<f64>::randn([1, 5, 2, 2], 1.0, &mut rng(5));
    let weights = [0.1, 0.2, 0.3, 0.4];
    let pooled = pool_regions(&fm, &Tensor::new([1, 1, 2, 2], weights.to_vec())).unwrap();
    for c in 0..5 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, w) in weights.iter().enumerate() {
            num += w * fm.data()[c * 4 + p];
            den += w;
        }
        assert!((pooled.data()[c] - num / den).abs() < 1e-6);
    }
}

#[test]
fn pooling_zero_mass_is_guarded() {
    let fm = Tensor::<f64>::randn([1, 2, 2, 2], 1.0, &mut rng(6));
    let pooled = pool_regions(&fm, &Tensor::zeros([1, 1, 2, 2])).unwrap();
    assert!(pooled.all_finite());
    assert!(pooled.data().iter().all(|&v| v == 0.0));
}

#[test]
fn assignments_from_dense_match_per_pixel_projection() {
    let cfg = ModelConfig {
        widths: [4, 8, 8, 16],
        embed_dim: 8,
        projector_hidden: 8,
        predictor_hidden: 8,
        num_queries: 3,
        decoder_heads: 2,
        decoder_ffn: 8,
        ..ModelConfig::default()
    };
    let model = FraModel::new(&cfg).unwrap();
    let st = model.init_online::<f64>(&mut rng(0));
    let fm = Tensor::<f64>::randn([1, 16, 2, 2], 1.0, &mut rng(7));
    let mut g = Graph::inference();
    let x = g.constant(fm.clone());
    let dense = model.project_dense(&mut g, &st, x, Mode::Eval).unwrap();
    let masks = model.mask_embeddings(&mut g, &st, x).unwrap();
    let field = compute_assignments(g.value(dense), g.value(masks), 0.1).unwrap();

    // Same field assembled pixel by pixel.
    let mut dense_loop = vec![0.0f64; 8 * 4];
    for p in 0..4 {
        let pixel: Vec<f64> = (0..16).map(|c| fm.data()[c * 4 + p]).collect();
        let px = g.constant(Tensor::new([1, 16], pixel));
        let out = model.project_local(&mut g, &st, px, Mode::Eval);
        for d in 0..8 {
            dense_loop[d * 4 + p] = g.value(out).data()[d];
        }
    }
    let looped = compute_assignments(&Tensor::new([1, 8, 2, 2], dense_loop), g.value(masks), 0.1).unwrap();
    assert!(field.m.max_abs_diff(&looped.m) < 1e-6);
    assert!(field.s.max_abs_diff(&looped.s) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn heatmap_channels_sum_to_one(seed in any::<u64>(), n in 1usize..9, t in 0.05f64..2.0) {
        let mut r = rng(seed);
        let dense = Tensor::<f32>::randn([2, 6, 3, 4], 1.0, &mut r);
        let masks = Tensor::<f32>::randn([2, n, 6], 1.0, &mut r);
        let a = compute_assignments(&dense, &masks, t).unwrap();
        for b in 0..2 {
            for p in 0..12 {
                let s: f32 = (0..n).map(|m| a.m.data()[(b * n + m) * 12 + p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
        prop_assert!(a.m.data().iter().all(|&v| v > 0.0 && v <= 1.0));
        prop_assert!(a.s.data().iter().all(|&v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn cosine_is_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
        let mut r = rng(seed);
        let dense = Tensor::<f64>::randn([1, 5, 2, 2], 1.0, &mut r);
        let masks = Tensor::<f64>::randn([1, 3, 5], 1.0, &mut r);
        let a = compute_assignments(&dense, &masks, 0.1).unwrap();
        let b = compute_assignments(&dense.map(|v| v * alpha), &masks.map(|v| v * beta), 0.1).unwrap();
        prop_assert!(a.s.max_abs_diff(&b.s) < 1e-5);
    }

    #[test]
    fn pooling_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let f1 = Tensor::<f64>::randn([2, 4, 3, 3], 1.0, &mut r);
        let f2 = Tensor::<f64>::randn([2, 4, 3, 3], 1.0, &mut r);
        let m = Tensor::<f64>::uniform([2, 3, 3, 3], 0.0, 1.0, &mut r);
        let mix = f1.zip_map(&f2, |a, b| alpha * a + beta * b);
        let lhs = pool_regions(&mix, &m).unwrap();
        let p1 = pool_regions(&f1, &m).unwrap();
        let p2 = pool_regions(&f2, &m).unwrap();
        let rhs = p1.zip_map(&p2, |a, b| alpha * a + beta * b);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }
}
