use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfield_core::camera::{Camera, Intrinsics, Pose, Vec3};
use semfield_core::diff::{grad_check, GradCheckConfig};
use semfield_core::field::{Bound, EncoderKind, FieldConfig, SemanticFieldModel};
use semfield_core::image::RgbImage;

fn small_cfg(encoder: EncoderKind) -> FieldConfig {
    FieldConfig {
        encoder,
        feature_dim: 8,
        hidden: vec![16, 16],
        image_width: 16,
        image_height: 8,
        ..Default::default()
    }
}

fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::new(w, h);
    img.data.iter_mut().for_each(|v| *v = rng.gen());
    img
}

fn camera(w: usize, h: usize) -> Camera {
    Camera {
        intrinsics: Intrinsics::from_hfov(w, h, 90.0),
        pose: Pose::looking([0.0, 0.0, 1.5], 0.0, 0.1),
    }
}

fn points_in_front(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.gen_range(-2.0..20.0), rng.gen_range(-15.0..15.0), rng.gen_range(-3.0..5.0)])
        .collect()
}

#[test]
fn per_image_encode_ignores_pixels() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 3).unwrap();
    let a = model.feature_map(&random_image(16, 8, 1), 0).unwrap();
    let b = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.values.data(), model.params.get("features").unwrap().data());
    assert_eq!(a.values.shape(), &[8, 16, 8]);
}

#[test]
fn conv_encoder_shape_contract() {
    let cfg = FieldConfig {
        encoder: EncoderKind::Conv,
        feature_dim: 64,
        image_width: 192,
        image_height: 64,
        ..Default::default()
    };
    let model = SemanticFieldModel::<f32>::new(cfg, 0).unwrap();
    let f = model.feature_map(&random_image(192, 64, 0), 0).unwrap();
    assert_eq!(f.values.shape(), &[64, 192, 64]);
    assert!(f.values.all_finite());
}

#[test]
fn conv_encoder_depends_on_image() {
    for seed in 0..5 {
        let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::Conv), seed).unwrap();
        let a = model.feature_map(&random_image(16, 8, 10 + seed), 0).unwrap();
        let b = model.feature_map(&random_image(16, 8, 20 + seed), 0).unwrap();
        let diff: f64 = a.values.data().iter().zip(b.values.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "seed {seed}: encoder output constant");
    }
}

#[test]
fn image_size_mismatch_is_an_error() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::Conv), 0).unwrap();
    assert!(model.feature_map(&RgbImage::new(8, 8), 0).is_err());
}

#[test]
fn points_behind_camera_are_invalid() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 0).unwrap();
    let fmap = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
    let s = model.query(&fmap, &camera(16, 8), [-5.0, 0.0, 1.5]).unwrap();
    assert!(!s.valid);
    assert_eq!(s.sigma, 0.0);
    assert!(s.logits.iter().all(|&l| l == 0.0));
}

#[test]
fn zero_density_weights_give_softplus_of_bias() {
    let mut model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 0).unwrap();
    let b = 0.7;
    let last = model.config.hidden.len();
    for i in 0..=last {
        let w = model.params.index_of(&format!("density.{i}.weight")).unwrap();
        model.params.tensor_mut(w).data_mut().fill(0.0);
        let bi = model.params.index_of(&format!("density.{i}.bias")).unwrap();
        model.params.tensor_mut(bi).data_mut().fill(if i == last { b } else { 0.0 });
    }
    let fmap = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
    let expected = (1.0f64 + b.exp()).ln();
    let batch = model.query_batch(&fmap, &camera(16, 8), &points_in_front(500, 1)).unwrap();
    let mut seen = 0;
    for (s, v) in batch.sigma.iter().zip(&batch.valid) {
        if *v {
            assert!((s - expected).abs() < 1e-12);
            seen += 1;
        }
    }
    assert!(seen > 50);
}

#[test]
fn initial_density_matches_config() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 0).unwrap();
    let fmap = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
    let batch = model.query_batch(&fmap, &camera(16, 8), &points_in_front(200, 2)).unwrap();
    let valid: Vec<f64> = batch.sigma.iter().zip(&batch.valid).filter(|p| *p.1).map(|p| *p.0).collect();
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    assert!(mean > 0.0 && mean < 1.0, "mean initial density {mean}");
}

#[test]
fn density_gradient_matches_finite_differences() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::Conv), 4).unwrap();
    let image = random_image(16, 8, 9);
    let cam = camera(16, 8);
    let points = points_in_front(40, 3);
    let report = grad_check(
        |tape, vars| {
            let bound = Bound { vars: vars.to_vec() };
            let f = model.encode(tape, &bound, &image).map_err(|e| match e {
                semfield_core::field::FieldError::Diff(d) => d,
                other => panic!("{other}"),
            })?;
            let q = model.query_vars(tape, &bound, f, &cam, &points).unwrap();
            let sq = tape.mul(q.sigma, q.sigma)?;
            tape.sum(sq)
        },
        &model.params,
        &GradCheckConfig {
            h: 1e-6,
            tol: 1e-3,
            max_coords: 8,
            seed: 0,
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn batched_query_is_bitwise_equal_to_looped() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 5).unwrap();
    let fmap = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
    let cam = camera(16, 8);
    let points = points_in_front(10_000, 4);
    let batch = model.query_batch(&fmap, &cam, &points).unwrap();
    let c = model.num_classes();
    for (i, &x) in points.iter().enumerate() {
        let one = model.query(&fmap, &cam, x).unwrap();
        assert_eq!(one, batch.sample(i, c), "point {i}");
    }
}

#[test]
fn field_samples_depend_only_on_pixel_and_distance() {
    let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 6).unwrap();
    let fmap = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
    let base = camera(16, 8);
    // A camera translated along its own axis and queried at the same
    // relative point sees the same pixel and distance.
    let moved = Camera {
        intrinsics: base.intrinsics,
        pose: Pose::looking([4.0, -2.0, 0.5], 0.0, 0.1),
    };
    let x = [6.0, 0.5, 1.0];
    let shift = [4.0, -2.0, -1.0];
    let y = [x[0] + shift[0], x[1] + shift[1], x[2] + shift[2]];
    let a = model.query(&fmap, &base, x).unwrap();
    let b = model.query(&fmap, &moved, y).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batch_permutation_permutes_outputs(seed in 0u64..1000) {
        let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::PerImage), 7).unwrap();
        let fmap = model.feature_map(&RgbImage::new(16, 8), 0).unwrap();
        let cam = camera(16, 8);
        let points = points_in_front(64, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..points.len()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let shuffled: Vec<Vec3> = perm.iter().map(|&i| points[i]).collect();
        let a = model.query_batch(&fmap, &cam, &points).unwrap();
        let b = model.query_batch(&fmap, &cam, &shuffled).unwrap();
        let c = model.num_classes();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert_eq!(a.sample(i, c), b.sample(j, c));
        }
    }

    #[test]
    fn density_is_nonnegative(seed in 0u64..1000) {
        let model = SemanticFieldModel::<f64>::new(small_cfg(EncoderKind::Conv), seed).unwrap();
        let fmap = model.feature_map(&random_image(16, 8, seed), 0).unwrap();
        let batch = model.query_batch(&fmap, &camera(16, 8), &points_in_front(256, seed)).unwrap();
        prop_assert!(batch.sigma.iter().all(|&s| s >= 0.0 && s.is_finite()));
        prop_assert!(batch.logits.iter().all(|l| l.is_finite()));
    }
}
