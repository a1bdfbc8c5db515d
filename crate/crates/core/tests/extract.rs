use pddf::evaluator::CountingField;
use pddf::extract::{
    chamfer_f_score, chamfer_f_score_brute, fit_vstar, load_vstar, read_xyz, sample_point_cloud, save_vstar, udf_query,
    write_xyz, PointCloudConfig, VStarConfig, VStarModel, DEFAULT_TAU,
};
use pddf::geometry::{AnalyticShape, Vec3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect()
}

#[test]
fn identical_clouds_score_perfectly() {
    let a = cloud(500, 1);
    let s = chamfer_f_score(&a, &a, DEFAULT_TAU).unwrap();
    assert_eq!((s.chamfer, s.f_tau, s.f_2tau), (0.0, 100.0, 100.0));
}

#[test]
fn single_pair_by_hand() {
    let a = [Vec3::zeros()];
    let b = [Vec3::new(0.01, 0.0, 0.0)];
    let s = chamfer_f_score(&a, &b, 1e-4).unwrap();
    assert!((s.chamfer - 0.2).abs() < 1e-12);
    assert_eq!(s.f_tau, 100.0);
    assert!(chamfer_f_score(&a, &[], 1e-4).is_err());
}

#[test]
fn indexed_matches_brute_force_bitwise() {
    let a = cloud(1000, 2);
    let b: Vec<Vec3> = cloud(1000, 3)
        .iter()
        .map(|p| p * 0.5 + Vec3::new(0.2, 0.0, 0.0))
        .collect();
    assert_eq!(
        chamfer_f_score(&a, &b, 0.01).unwrap(),
        chamfer_f_score_brute(&a, &b, 0.01).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_agree_and_are_ordered(seed in 0u64..1000, n in 1usize..200, m in 1usize..200, tau in 1e-4f64..0.5) {
        let a = cloud(n, seed);
        let b = cloud(m, seed + 7);
        let fast = chamfer_f_score(&a, &b, tau).unwrap();
        prop_assert_eq!(fast, chamfer_f_score_brute(&a, &b, tau).unwrap());
        prop_assert!(fast.f_2tau >= fast.f_tau);
        let swapped = chamfer_f_score(&b, &a, tau).unwrap();
        prop_assert_eq!(swapped.chamfer, fast.chamfer);
        prop_assert_eq!(swapped.f_tau, fast.f_tau);
    }
}

#[test]
fn exact_field_point_cloud_lies_on_the_sphere() {
    let sphere = AnalyticShape::sphere(0.9);
    let config = PointCloudConfig {
        n_p: 300,
        n_v: 32,
        ..PointCloudConfig::default()
    };
    let points = sample_point_cloud(&sphere, &config).unwrap();
    assert_eq!(points.len(), 300);
    let worst = points.iter().map(|q| (q.norm() - 0.9).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
    assert_eq!(points, sample_point_cloud(&sphere, &config).unwrap());
}

#[test]
fn point_cloud_query_budget() {
    let field = CountingField::new(AnalyticShape::sphere(0.9));
    let config = PointCloudConfig {
        n_p: 10,
        n_v: 8,
        n_h: 2,
        ..PointCloudConfig::default()
    };
    let points = sample_point_cloud(&field, &config).unwrap();
    assert_eq!(points.len(), 10);
    // 11 positions, each step costs n_v + 1 queries unless a direction set is redrawn
    assert!(field.count() >= 11 * 2 * 9);
}

#[test]
fn xyz_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.xyz");
    let points = cloud(100, 9);
    write_xyz(&points, &path).unwrap();
    assert_eq!(read_xyz(&path).unwrap(), points);
    std::fs::write(&path, "1 2\n").unwrap();
    assert!(read_xyz(&path).is_err());
}

#[test]
fn zero_iterations_returns_initial_model() {
    let config = VStarConfig {
        iterations: 0,
        hidden_sizes: vec![16, 16],
        ..VStarConfig::default()
    };
    let (model, history) = fit_vstar(&AnalyticShape::sphere(1.0), &config).unwrap();
    assert!(history.is_empty());
    assert_eq!(model, VStarModel::new(&config).unwrap());
}

#[test]
fn vstar_on_exact_sphere_finds_closest_direction() {
    let sphere = AnalyticShape::sphere(1.0);
    let config = VStarConfig {
        hidden_sizes: vec![64; 3],
        iterations: 1500,
        lr: 1e-3,
        points_per_step: 128,
        seed: 4,
        ..VStarConfig::default()
    };
    let (model, history) = fit_vstar(&sphere, &config).unwrap();
    assert!(history.last().unwrap().total < history[0].total);
    let probes = [
        (Vec3::new(0.0, 0.0, 0.5), Vec3::z()),
        (Vec3::new(0.6, 0.0, 0.0), Vec3::x()),
        (Vec3::new(0.0, -0.4, 0.4), Vec3::new(0.0, -1.0, 1.0).normalize()),
    ];
    let points: Vec<Vec3> = probes.iter().map(|(p, _)| *p).collect();
    let estimates = udf_query(&sphere, &model, &points).unwrap();
    for ((p, expected), est) in probes.iter().zip(&estimates) {
        let angle = est.v_star.dot(expected).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 10.0, "{p:?}: {angle} degrees");
        assert!((est.udf - (p.norm() - 1.0).abs()).abs() < 0.05, "{p:?}: {}", est.udf);
        assert!(est.confident);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vstar.bin");
    save_vstar(&model, &path).unwrap();
    assert_eq!(load_vstar(&path).unwrap(), model);
}
