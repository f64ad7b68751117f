mod oracles;

use semiseg_core::geometry::{Pose, Vec3};
use semiseg_core::range::{self, GridConfig};
use rand::Rng;

#[test]
fn round_trip_within_one_bin() {
    for (seed, g) in [(1, GridConfig::default()), (2, oracles::grid(64, 128, 360.0)), (3, oracles::grid(32, 2160, 360.0))] {
        let worst = oracles::worst_round_trip(seed, 1000, &g);
        assert!(worst <= 1.0, "grid {}x{}: {worst}", g.rows, g.cols);
    }
}

#[test]
fn back_projection_lands_in_its_own_cell() {
    let g = GridConfig::default();
    for r in (0..g.rows).step_by(7) {
        for c in (0..g.cols).step_by(13) {
            let p = range::back_project(&g, r, c, 12.5).unwrap();
            assert_eq!(g.pixel_of(p), Some((r, c)));
            assert!((p.norm() - 12.5).abs() < 1e-12);
        }
    }
}

#[test]
fn transforms_are_rigid() {
    let mut rng = oracles::rng(5);
    for _ in 0..200 {
        let (a, b) = (oracles::random_pose(&mut rng), oracles::random_pose(&mut rng));
        let pts: Vec<Vec3> = (0..8)
            .map(|_| Vec3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let moved = range::transform_to_frame(&pts, &a, &b).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert!((pts[i].distance(pts[j]) - moved[i].distance(moved[j])).abs() < 1e-9);
            }
        }
        let back = range::transform_to_frame(&moved, &b, &a).unwrap();
        for (p, q) in pts.iter().zip(&back) {
            assert!(p.distance(*q) < 1e-9);
        }
        let same = range::transform_to_frame(&pts, &a, &a).unwrap();
        for (p, q) in pts.iter().zip(&same) {
            assert!(p.distance(*q) < 1e-9);
        }
    }
}

#[test]
fn transforms_compose() {
    let mut rng = oracles::rng(6);
    for _ in 0..100 {
        let (a, b, c) = (oracles::random_pose(&mut rng), oracles::random_pose(&mut rng), oracles::random_pose(&mut rng));
        let p = [Vec3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0))];
        let direct = range::transform_to_frame(&p, &a, &c).unwrap();
        let via = range::transform_to_frame(&range::transform_to_frame(&p, &a, &b).unwrap(), &b, &c).unwrap();
        assert!(direct[0].distance(via[0]) < 1e-9);
    }
}

#[test]
fn invalid_poses_are_rejected() {
    let skew = Pose { position: Vec3::ZERO, rotation: [1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] };
    assert!(range::transform_to_frame(&[Vec3::ZERO], &skew, &Pose::IDENTITY).is_err());
}
