use semfield_core::camera::PosEncConfig;
use semfield_core::diff::{read_checkpoint, write_checkpoint, AdamConfig, Checkpoint};
use semfield_core::field::{EncoderKind, FieldConfig, SemanticFieldModel};
use semfield_core::losses::LossWeights;
use semfield_core::render::RenderConfig;
use semfield_core::rng;
use semfield_core::scene::{sequence_in_world, CameraId, DatasetConfig, LabelNoise, Sequence, TrajectoryConfig, VoxelWorld, BUILDING, ROAD};
use semfield_core::train::{
    accumulate_gradients, checkpoint_of, draw_samples, fit, gradient_suite, sample_patches, sample_training_frames, source_frames, FitOptions,
    TrainConfig, TrainError, LOSS_CSV_HEADER,
};

/// Flat road with a single building wall 8 m ahead of the start.
fn one_wall_sequence(steps: usize) -> Sequence {
    let mut world = VoxelWorld::empty([64, 48, 16], 0.2, 6).unwrap();
    world.texture = 0.1;
    for y in 0..48 {
        for x in 0..64 {
            world.set(x, y, 0, ROAD);
        }
        for x in 44..50 {
            for z in 1..14 {
                world.set(x, y, z, BUILDING);
            }
        }
    }
    let cfg = DatasetConfig {
        trajectory: TrajectoryConfig {
            num_steps: steps,
            yaw_noise_deg: 0.0,
            ..Default::default()
        },
        noise: LabelNoise {
            radius: 0,
            flip_rate: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    sequence_in_world(world, &cfg).unwrap()
}

fn small_field() -> FieldConfig {
    FieldConfig {
        feature_dim: 8,
        hidden: vec![16, 16],
        posenc: PosEncConfig {
            num_frequencies: 3,
            distance_range: (0.5, 14.0),
        },
        ..Default::default()
    }
}

fn small_render() -> RenderConfig {
    RenderConfig {
        samples: 16,
        z_near: 0.5,
        z_far: 14.0,
        stochastic: true,
        ..Default::default()
    }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        n_frames: 4,
        patches_per_image: 2,
        patch_size: 4,
        batch_size: 1,
        steps,
        optimizer: AdamConfig {
            learning_rate: 5e-3,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn frame_set_layout_and_offset_range() {
    let cfg = TrainConfig::default();
    let mut r = rng::stream(1, "t", 0);
    for _ in 0..500 {
        let s = sample_training_frames(60, 3, &cfg, &mut r).unwrap();
        assert_eq!(s.frames.len(), 8);
        assert_eq!((s.frames[0].timestep, s.frames[0].camera), (3, CameraId::FrontLeft));
        assert_eq!((s.frames[1].timestep, s.frames[1].camera), (3, CameraId::FrontRight));
        assert_eq!((s.frames[2].timestep, s.frames[3].timestep), (8, 8));
        for pair in [(4, CameraId::SideLeft), (6, CameraId::SideRight)] {
            let a = s.frames[pair.0];
            let b = s.frames[pair.0 + 1];
            assert_eq!((a.camera, b.camera), (pair.1, pair.1));
            let o = a.timestep - 3;
            assert!((10..=40).contains(&o), "offset {o}");
            assert_eq!(b.timestep, a.timestep + 1);
        }
    }
}

#[test]
fn side_offsets_are_uniform() {
    let cfg = TrainConfig::default();
    let mut r = rng::stream(7, "chi2", 0);
    let mut hist = [0usize; 31];
    let n = 1000;
    for _ in 0..n {
        let s = sample_training_frames(60, 0, &cfg, &mut r).unwrap();
        hist[s.frames[4].timestep - 10] += 1;
    }
    let expected = n as f64 / 31.0;
    let chi2: f64 = hist.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // upper 1% point of chi-squared with 30 degrees of freedom
    assert!(chi2 < 50.892, "chi2 {chi2}");
}

#[test]
fn side_offsets_differ_between_sides() {
    let cfg = TrainConfig::default();
    let mut r = rng::stream(2, "sides", 0);
    let differ = (0..200)
        .filter(|_| {
            let s = sample_training_frames(60, 0, &cfg, &mut r).unwrap();
            s.frames[4].timestep != s.frames[6].timestep
        })
        .count();
    assert!(differ > 150);
}

#[test]
fn fixed_offset_is_deterministic() {
    let cfg = TrainConfig {
        fixed_side_offset: Some(10),
        ..Default::default()
    };
    let a = sample_training_frames(30, 2, &cfg, &mut rng::stream(1, "a", 0)).unwrap();
    let b = sample_training_frames(30, 2, &cfg, &mut rng::stream(99, "b", 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames[4].timestep, 12);
    assert_eq!(a.frames[7].timestep, 13);
}

#[test]
fn short_sequence_is_rejected() {
    let cfg = TrainConfig::default();
    let err = sample_training_frames(41, 0, &cfg, &mut rng::stream(0, "s", 0)).unwrap_err();
    assert!(matches!(err, TrainError::SequenceTooShort { needed: 41, len: 41 }));
    assert!(sample_training_frames(42, 0, &cfg, &mut rng::stream(0, "s", 0)).is_ok());
}

#[test]
fn input_is_never_its_own_source() {
    let cfg = TrainConfig::default();
    let s = sample_training_frames(60, 0, &cfg, &mut rng::stream(0, "src", 0)).unwrap();
    for i in 0..s.frames.len() {
        let src = source_frames(&s, i);
        assert_eq!(src.len(), 7);
        assert!(!src.contains(&s.frames[i]));
    }
}

#[test]
fn patches_stay_in_bounds() {
    let mut r = rng::stream(3, "patches", 0);
    let ps = sample_patches(96, 48, 10_000, 8, &mut r);
    assert_eq!(ps.len(), 10_000);
    for p in &ps {
        assert!(p.x + p.width <= 96 && p.y + p.height <= 48);
        assert_eq!((p.width, p.height), (8, 8));
    }
    let one = sample_patches(8, 8, 1, 8, &mut r);
    assert_eq!((one[0].x, one[0].y), (0, 0));
    let a = sample_patches(96, 48, 32, 8, &mut rng::stream(5, "p", 0));
    let b = sample_patches(96, 48, 32, 8, &mut rng::stream(5, "p", 0));
    assert_eq!(a, b);
}

#[test]
fn semantics_alone_reach_density_head() {
    let seq = one_wall_sequence(8);
    let mut model = SemanticFieldModel::<f64>::new(small_field(), 0).unwrap();
    let cfg = TrainConfig {
        use_photometric: false,
        ..small_train(1)
    };
    let weights = LossWeights {
        lambda_ph: 0.0,
        lambda_eas: 0.0,
        ..Default::default()
    };
    let data = [seq];
    let mut r = rng::stream(0, "sem-only", 0);
    let samples = draw_samples(&data, &cfg, &mut r).unwrap();
    model.params.zero_grads();
    accumulate_gradients(&mut model, &data, &samples, &cfg, &small_render(), &weights, 1, &mut r).unwrap();
    let mut norm = 0.0;
    for i in 0..model.params.len() {
        if model.params.name(i).starts_with("density.") {
            norm += model.params.tensor(i).grad().unwrap().iter().map(|g| g * g).sum::<f64>();
        }
    }
    assert!(norm.sqrt() > 1e-8, "density grad norm {}", norm.sqrt());
}

#[test]
fn semantic_loss_falls_on_one_wall_scene() {
    let seq = one_wall_sequence(8);
    let cfg = TrainConfig {
        patches_per_image: 8,
        ..small_train(200)
    };
    let res = fit::<f32>(&[seq], &small_field(), &cfg, &small_render(), &LossWeights::default(), &FitOptions::default()).unwrap();
    let windows: Vec<f64> = res.losses.chunks(50).map(|w| w.iter().map(|l| l.sem).sum::<f64>() / w.len() as f64).collect();
    assert_eq!(windows.len(), 4);
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "smoothed semantic loss {windows:?}");
    }
}

#[test]
fn identical_seeds_give_identical_losses() {
    let seq = one_wall_sequence(8);
    let data = [seq];
    let run = || fit::<f64>(&data, &small_field(), &small_train(4), &small_render(), &LossWeights::default(), &FitOptions::default()).unwrap().losses;
    let a = run();
    let b = run();
    assert_eq!(a.len(), 4);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x, y);
    }
}

#[test]
fn zero_steps_checkpoint_is_initialisation() {
    let seq = one_wall_sequence(8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(0);
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let res = fit::<f64>(&[seq], &small_field(), &cfg, &small_render(), &LossWeights::default(), &opts).unwrap();
    let init = SemanticFieldModel::<f64>::new(small_field(), rng::derive_seed(cfg.seed, "model", 0)).unwrap();
    let ck = read_checkpoint(res.checkpoint.as_ref().unwrap()).unwrap();
    let mut loaded = SemanticFieldModel::<f64>::new(small_field(), 12345).unwrap();
    ck.load_into(&mut loaded.params).unwrap();
    for i in 0..init.params.len() {
        assert_eq!(init.params.tensor(i).data(), loaded.params.tensor(i).data(), "{}", init.params.name(i));
    }
    let csv = std::fs::read_to_string(res.loss_csv.unwrap()).unwrap();
    assert_eq!(csv.trim(), LOSS_CSV_HEADER);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let seq = one_wall_sequence(8);
    let data = [seq];
    let cfg = small_train(6);
    let w = LossWeights::default();
    let full = fit::<f64>(&data, &small_field(), &cfg, &small_render(), &w, &FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(3),
        ..Default::default()
    };
    let part = fit::<f64>(&data, &small_field(), &cfg, &small_render(), &w, &first).unwrap();
    assert_eq!(part.losses.len(), 3);
    let second = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume: part.checkpoint.clone(),
        ..Default::default()
    };
    let rest = fit::<f64>(&data, &small_field(), &cfg, &small_render(), &w, &second).unwrap();
    let resumed: Vec<_> = part.losses.iter().chain(&rest.losses).copied().collect();
    assert_eq!(resumed, full.losses);
    for i in 0..full.model.params.len() {
        assert_eq!(full.model.params.tensor(i).data(), rest.model.params.tensor(i).data());
    }
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let steps: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let seq = one_wall_sequence(8);
    let dir = tempfile::tempdir().unwrap();
    let opts = FitOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let res = fit::<f64>(&[seq], &small_field(), &small_train(2), &small_render(), &LossWeights::default(), &opts).unwrap();
    let path = res.checkpoint.unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let ck: Checkpoint = read_checkpoint(&path).unwrap();
    let again = dir.path().join("again.s4cp");
    write_checkpoint(&again, &ck).unwrap();
    assert_eq!(bytes, std::fs::read(&again).unwrap());
    assert_eq!(bytes, checkpoint_of(&res.model, &res.optimizer).encode());
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let seq = one_wall_sequence(8);
    for encoder in [EncoderKind::PerImage, EncoderKind::Conv] {
        for e in gradient_suite(&seq, encoder, 0, 1e-3).unwrap() {
            assert!(e.report.passed, "{encoder:?} {}: {:?}", e.term, e.report);
        }
    }
}

#[test]
fn exact_checkpoint_entries_keep_every_f64() {
    use semfield_core::diff::Tensor;
    let values = vec![
        0.1,
        -0.0,
        1e-43,
        -3.3e-310,
        f64::MIN_POSITIVE,
        1e300,
        f64::INFINITY,
        f64::from_bits(0x7ff8_0000_dead_beef),
        std::f64::consts::PI,
    ];
    let mut ck = Checkpoint::new();
    ck.push_exact("v", &Tensor::new(vec![values.len()], values.clone()).unwrap());
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    let (shape, got) = back.get_exact("v").unwrap();
    assert_eq!(shape, vec![values.len()]);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&got), bits(&values));

    let mut plain = Checkpoint::new();
    plain.push_exact("w", &Tensor::new(vec![2], vec![0.5f64, -2.0]).unwrap());
    assert_eq!(plain.entries.len(), 1);
}
