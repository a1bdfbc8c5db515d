use pddf::field::{PddfModel, SirenConfig};
use pddf::geometry::{AnalyticShape, OrientedPoint, Vec3};
use pddf::losses::{loss_and_gradient, loss_terms, total_loss, Batch, LossWeights};
use pddf::sampler::{draw_samples, DatasetSpec, Oracle, SampleType, TrainingSample};
use proptest::prelude::*;

fn tiny_model(seed: u64) -> PddfModel {
    let mut config = SirenConfig::new(vec![16, 16]);
    config.seed = seed;
    config.omega_0 = 3.0;
    PddfModel::new(&config).unwrap()
}

fn mixed_batch(seed: u64) -> Batch {
    let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
    let spec = DatasetSpec::default();
    let mut labelled = Vec::new();
    for (kind, n) in [
        (SampleType::U, 1),
        (SampleType::A, 2),
        (SampleType::B, 1),
        (SampleType::S, 1),
        (SampleType::T, 1),
        (SampleType::O, 1),
    ] {
        labelled.extend(draw_samples(&oracle, kind, n, &spec, seed + kind.index() as u64).unwrap());
    }
    Batch {
        labelled,
        reg_only: vec![OrientedPoint::new(Vec3::new(0.3, -0.5, 0.2), Vec3::new(1.0, 2.0, -0.5))],
    }
}

/// Weights with every term switched on so each gradient path is exercised.
fn all_terms() -> LossWeights {
    LossWeights {
        gamma_v_xi: 0.3,
        ..LossWeights::default()
    }
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let mut model = tiny_model(11);
    let batch = mixed_batch(5);
    let weights = all_terms();
    let (breakdown, grad) = loss_and_gradient(&model, &batch, &weights).unwrap();
    assert!(breakdown.l_t > 0.0 && breakdown.l_n < 0.0 && breakdown.l_de > 0.0);
    let base = model.net.flat_params();
    let h = 1e-6;
    let mut checked = 0;
    for i in 0..base.len() {
        if grad[i].abs() <= 1e-6 {
            continue;
        }
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.net.set_flat_params(&p);
        let plus = loss_terms(&model, &batch, &weights).unwrap().total;
        p[i] = base[i] - h;
        model.net.set_flat_params(&p);
        let minus = loss_terms(&model, &batch, &weights).unwrap().total;
        let fd = (plus - minus) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
        assert!(rel < 1e-3, "param {i}: analytic {} vs fd {fd}", grad[i]);
        checked += 1;
    }
    model.net.set_flat_params(&base);
    assert!(checked > base.len() / 2, "only {checked} coordinates checked");
}

#[test]
fn only_offset_samples_leave_regularizers_at_zero() {
    let model = tiny_model(3);
    let oracle = Oracle::analytic(AnalyticShape::sphere(0.9));
    let batch = Batch {
        labelled: draw_samples(&oracle, SampleType::O, 32, &DatasetSpec::default(), 1).unwrap(),
        reg_only: vec![],
    };
    let b = loss_terms(&model, &batch, &LossWeights::default()).unwrap();
    assert_eq!((b.l_de, b.l_n, b.l_v, b.l_t), (0.0, 0.0, 0.0, 0.0));
    assert!(b.l_xi > 0.0);
}

#[test]
fn zero_head_gives_reference_values() {
    let mut model = tiny_model(4);
    model.zero_head();
    let sample = TrainingSample {
        op: OrientedPoint::new(Vec3::zeros(), Vec3::z()),
        visible: true,
        depth: 0.9,
        normal: Some(-Vec3::z()),
        kind: SampleType::U,
    };
    let batch = Batch {
        labelled: vec![sample],
        reg_only: vec![],
    };
    let b = loss_terms(&model, &batch, &LossWeights::default()).unwrap();
    assert!((b.l_xi - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(b.l_v, 0.25);
    assert!((b.l_d - 0.81).abs() < 1e-12);
    assert_eq!(b.l_d, b.l_d_au);

    let surface = TrainingSample {
        kind: SampleType::S,
        depth: 0.0,
        ..sample
    };
    let batch = Batch {
        labelled: vec![surface],
        reg_only: vec![],
    };
    let b = loss_terms(&model, &batch, &LossWeights::default()).unwrap();
    assert_eq!(b.l_t, 4.0);
}

#[test]
fn total_is_weighted_sum_and_linear() {
    let model = tiny_model(6);
    let batch = mixed_batch(8);
    let w = all_terms();
    let b = loss_terms(&model, &batch, &w).unwrap();
    assert!((b.total - total_loss(&b, &w)).abs() < 1e-9);
    let doubled = LossWeights {
        gamma_xi: 2.0 * w.gamma_xi,
        ..w.clone()
    };
    let b2 = loss_terms(&model, &batch, &doubled).unwrap();
    assert!((b2.total - b.total - w.gamma_xi * b.l_xi).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_term_ranges_hold(seed in 0u64..1000) {
        let model = tiny_model(seed);
        let batch = mixed_batch(seed);
        let w = LossWeights::default();
        let b = loss_terms(&model, &batch, &w).unwrap();
        prop_assert!((-1.0..=0.0).contains(&b.l_n));
        prop_assert!((0.0..=0.25).contains(&b.l_v));
        prop_assert!((0.0..=w.eps_t * w.eps_t).contains(&b.l_t));
        prop_assert!(b.l_xi >= 0.0 && b.l_d >= 0.0 && b.l_de >= 0.0);
    }
}
