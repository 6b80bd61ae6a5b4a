use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfield_core::camera::{self, project, Camera, Intrinsics, Pose, Ray};
use semfield_core::scene::*;

fn small_world(seed: u64) -> VoxelWorld {
    generate_scene(&SceneConfig {
        seed,
        dims: [32, 32, 16],
        ..Default::default()
    })
    .unwrap()
}

/// Chord length of a ray through an axis-aligned voxel box.
fn chord(world: &VoxelWorld, v: [usize; 3], ray: &Ray) -> f64 {
    let vs = world.voxel_size;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let lo = world.origin[a] + v[a] as f64 * vs;
        let hi = lo + vs;
        if ray.direction[a] == 0.0 {
            continue;
        }
        let (p, q) = ((lo - ray.origin[a]) / ray.direction[a], (hi - ray.origin[a]) / ray.direction[a]);
        t0 = t0.max(p.min(q));
        t1 = t1.min(p.max(q));
    }
    (t1 - t0).max(0.0)
}

fn brute_force(world: &VoxelWorld, ray: &Ray) -> Option<f64> {
    let step = world.voxel_size / 100.0;
    let ext = world.extent();
    let mut t = 0.0;
    loop {
        let p = ray.point_at(t);
        if (0..3).any(|a| p[a] < world.origin[a] - 1e-12 || p[a] > world.origin[a] + ext[a]) {
            return None;
        }
        if world.label_at(p) != 0 {
            return Some(t);
        }
        t += step;
    }
}

#[test]
fn dda_agrees_with_fine_stepping() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let worlds: Vec<VoxelWorld> = (0..4).map(small_world).collect();
    let mut skipped_corner_clips = 0;
    for i in 0..100_000 {
        let world = &worlds[i % worlds.len()];
        let ext = world.extent();
        let origin = [
            rng.gen_range(0.0..ext[0]),
            rng.gen_range(0.0..ext[1]),
            rng.gen_range(0.0..ext[2]),
        ];
        let dir = camera::normalize([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let ray = Ray {
            origin,
            direction: dir,
            pixel: [0.0; 2],
        };
        let hit = dda_raycast(world, &ray);
        let brute = brute_force(world, &ray);
        match (hit.hit, brute) {
            (true, Some(tb)) => {
                assert!(hit.depth <= tb + 1e-9, "DDA later than stepping: {} vs {tb}", hit.depth);
                if tb - hit.depth > world.voxel_size / 50.0 {
                    // stepping jumped over a corner clip of the DDA voxel
                    assert!(chord(world, hit.voxel, &ray) < world.voxel_size / 100.0 + 1e-9);
                    skipped_corner_clips += 1;
                }
            }
            (true, None) => {
                assert!(chord(world, hit.voxel, &ray) < world.voxel_size / 100.0 + 1e-9);
                skipped_corner_clips += 1;
            }
            (false, Some(tb)) => panic!("DDA missed a surface at {tb}"),
            (false, None) => {}
        }
    }
    assert!(skipped_corner_clips < 1000);
}

#[test]
fn wall_is_rendered_with_exact_depth() {
    let mut world = VoxelWorld::empty([32, 64, 64], 0.2, 6).unwrap();
    for z in 0..64 {
        for y in 0..64 {
            world.set(20, y, z, BUILDING);
        }
    }
    let intr = Intrinsics::from_hfov(32, 16, 90.0);
    let cam = Camera {
        intrinsics: intr,
        pose: Pose::looking([0.2, 6.4, 6.4], 0.0, 0.0),
    };
    let view = gt_render(&world, &cam);
    assert!(view.gt_seg.iter().all(|&c| c == BUILDING));
    for y in 0..16 {
        for x in 0..32 {
            let d = view.gt_depth[y * 32 + x] as f64;
            let ray = camera::pixel_ray(&intr, &cam.pose, [x as f64 + 0.5, y as f64 + 0.5]).unwrap();
            let z = d * cam.pose.to_local(ray.point_at(1.0))[2];
            assert!((z - 3.8).abs() < 1e-5, "{z}");
        }
    }
    assert_eq!(gt_render(&world, &cam), view);
}

fn sequence() -> Sequence {
    build_sequence(&DatasetConfig {
        trajectory: TrajectoryConfig {
            num_steps: 8,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap()
}

fn z_depth(frame: &Frame, x: usize, y: usize) -> Option<(f64, [f64; 3])> {
    let d = frame.gt_depth[y * frame.width() + x] as f64;
    if d <= 0.0 {
        return None;
    }
    let ray = camera::pixel_ray(&frame.camera.intrinsics, &frame.camera.pose, [x as f64 + 0.5, y as f64 + 0.5]).unwrap();
    let p = ray.point_at(d);
    Some((frame.camera.pose.to_local(p)[2], p))
}

#[test]
fn reprojected_depth_lands_on_same_class() {
    let seq = sequence();
    let pairs = [
        (seq.frame(0, CameraId::FrontLeft), seq.frame(0, CameraId::FrontRight)),
        (seq.frame(0, CameraId::FrontLeft), seq.frame(5, CameraId::FrontLeft)),
        (seq.frame(2, CameraId::SideLeft), seq.frame(4, CameraId::SideLeft)),
    ];
    for (a, b) in pairs {
        let (mut covis, mut agree) = (0usize, 0usize);
        for y in 0..a.height() {
            for x in 0..a.width() {
                let Some((_, p)) = z_depth(a, x, y) else { continue };
                let pr = project(&b.camera.intrinsics, &b.camera.pose, p);
                if !pr.in_view {
                    continue;
                }
                let (bx, by) = (pr.pixel[0] as usize, pr.pixel[1] as usize);
                if bx >= b.width() || by >= b.height() {
                    continue;
                }
                let db = b.gt_depth[by * b.width() + bx] as f64;
                let dist = camera::norm(camera::sub(p, b.camera.pose.center()));
                if db <= 0.0 || (db - dist).abs() > 0.05 * dist {
                    continue; // occluded in b
                }
                covis += 1;
                agree += (a.gt_seg[y * a.width() + x] == b.gt_seg[by * b.width() + bx]) as usize;
            }
        }
        assert!(covis > 500, "{covis}");
        let frac = agree as f64 / covis as f64;
        assert!(frac >= 0.98, "{frac}");
    }
}

#[test]
fn stereo_disparity_matches_baseline() {
    let seq = sequence();
    let rig = RigConfig::default();
    for t in [0, 3, 7] {
        let (l, r) = (seq.frame(t, CameraId::FrontLeft), seq.frame(t, CameraId::FrontRight));
        let fx = l.camera.intrinsics.fx;
        let (mut checked, mut consistent) = (0usize, 0usize);
        for y in 0..l.height() {
            for x in 0..l.width() {
                let Some((z, _)) = z_depth(l, x, y) else { continue };
                let disparity = fx * rig.baseline / z;
                let xr = x as f64 + 0.5 - disparity;
                if xr < 0.0 {
                    continue;
                }
                let xi = xr as usize;
                checked += 1;
                let Some((zr, _)) = z_depth(r, xi, y) else { continue };
                if (zr - z).abs() > 0.02 * z {
                    continue;
                }
                consistent += 1;
                let measured = x as f64 - xi as f64;
                assert!((measured - disparity).abs() <= 0.51 + 0.5 * (zr - z).abs() * fx * rig.baseline / (z * zr));
            }
        }
        assert!(consistent as f64 >= 0.8 * checked as f64, "{consistent}/{checked}");
    }
}

#[test]
fn trajectory_contracts() {
    let world = generate_scene(&SceneConfig::default()).unwrap();
    let rig = CameraRig::new(&RigConfig::default());
    let still = trajectory(
        &world,
        &rig,
        &TrajectoryConfig {
            speed: 0.0,
            yaw_noise_deg: 0.0,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    assert!(still.windows(2).all(|w| w[0] == w[1]));

    let straight = trajectory(
        &world,
        &rig,
        &TrajectoryConfig {
            yaw_noise_deg: 0.0,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let a = straight[0].translation;
    let b = straight[straight.len() - 1].translation;
    for p in &straight {
        let t = p.translation;
        let cross = (t[0] - a[0]) * (b[1] - a[1]) - (t[1] - a[1]) * (b[0] - a[0]);
        assert!(cross.abs() < 1e-12 && t[2] == a[2]);
    }

    let noisy = trajectory(&world, &rig, &TrajectoryConfig::default(), 3).unwrap();
    assert_eq!(noisy.len(), 40);
    for w in noisy.windows(2) {
        let step = camera::norm(camera::sub(w[1].translation, w[0].translation));
        assert!((step - world.voxel_size).abs() < 1e-9);
    }
    let too_long = TrajectoryConfig {
        num_steps: 80,
        ..Default::default()
    };
    assert!(matches!(trajectory(&world, &rig, &too_long, 0), Err(SceneError::OffWorld(_))));
}

#[test]
fn occupancy_fraction_is_moderate_across_seeds() {
    for seed in 0..100 {
        let f = generate_scene(&SceneConfig {
            seed,
            ..Default::default()
        })
        .unwrap()
        .occupancy_fraction();
        assert!((0.05..=0.40).contains(&f), "seed {seed}: {f}");
    }
}

#[test]
fn one_step_gives_one_rig_pose() {
    let seq = build_sequence(&DatasetConfig {
        trajectory: TrajectoryConfig {
            num_steps: 1,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap();
    assert_eq!(seq.frames.len(), 4);
}

#[test]
fn label_corruption_calibration() {
    let seq = sequence();
    let mean = |noise: &LabelNoise| {
        let accs: Vec<f64> = seq
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| label_accuracy(&corrupt_labels(&f.gt_seg, f.width(), f.height(), 6, i as u64, noise), &f.gt_seg))
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let default = mean(&LabelNoise::default());
    assert!((0.85..=0.95).contains(&default), "{default}");
    let chance = mean(&LabelNoise {
        radius: 0,
        flip_rate: 1.0,
        ..Default::default()
    });
    assert!((chance - 0.2).abs() <= 0.05, "{chance}");

    let f = &seq.frames[0];
    let a = corrupt_labels(&f.gt_seg, f.width(), f.height(), 6, 9, &LabelNoise::default());
    let b = corrupt_labels(&f.gt_seg, f.width(), f.height(), 6, 9, &LabelNoise::default());
    assert_eq!(a, b);
    // boundaries move by at most the radius: every label exists within r px in gt
    let r = 2isize;
    let (w, h) = (f.width() as isize, f.height() as isize);
    let jitter_only = corrupt_labels(
        &f.gt_seg,
        f.width(),
        f.height(),
        6,
        9,
        &LabelNoise {
            flip_rate: 0.0,
            ..Default::default()
        },
    );
    for y in 0..h {
        for x in 0..w {
            let l = jitter_only[(y * w + x) as usize];
            let found = (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (sx, sy) = ((x + dx).clamp(0, w - 1), (y + dy).clamp(0, h - 1));
                    f.gt_seg[(sy * w + sx) as usize] == l
                })
            });
            assert!(found);
        }
    }
}
