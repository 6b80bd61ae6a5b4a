use proptest::prelude::*;
use semfield_core::camera::{norm, pixel_ray, posenc, project, sub, Intrinsics, Pose, Vec3};

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (
        -3.0f64..3.0,
        -0.5f64..0.5,
        prop::array::uniform3(-10.0f64..10.0),
    )
        .prop_map(|(yaw, pitch, t)| Pose::looking(t, yaw, pitch))
}

fn max_abs(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> f64 {
    let mut m = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            m = m.max((a[i][j] - b[i][j]).abs());
        }
    }
    m
}

proptest! {
    #[test]
    fn pixel_ray_round_trips(pose in pose_strategy(), us in prop::collection::vec((0.0f64..96.0, 0.0f64..48.0, 0.5f64..60.0), 100)) {
        let intr = Intrinsics::from_hfov(96, 48, 90.0);
        for (u, v, t) in us {
            let ray = pixel_ray(&intr, &pose, [u, v]).unwrap();
            let p = project(&intr, &pose, ray.point_at(t));
            prop_assert!((p.pixel[0] - u).abs() <= 1e-6 && (p.pixel[1] - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn pose_composition_is_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
        let l = a.compose(&b).compose(&c);
        let r = a.compose(&b.compose(&c));
        prop_assert!(max_abs(&l.to_matrix(), &r.to_matrix()) <= 1e-9);
        let id = a.compose(&a.inverse());
        prop_assert!(max_abs(&id.to_matrix(), &Pose::identity().to_matrix()) <= 1e-9);
        prop_assert!(a.orthonormality_error() <= 1e-9);
    }

    #[test]
    fn posenc_is_bounded(v in -1.0e3f64..1.0e3) {
        for x in posenc(v, 6) {
            prop_assert!((-1.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn transform_and_local_are_inverse(pose in pose_strategy(), x in prop::array::uniform3(-50.0f64..50.0)) {
        let back: Vec3 = pose.transform_point(pose.to_local(x));
        prop_assert!(norm(sub(back, x)) < 1e-9);
    }
}
