use c2r_model::backbone::interpolate;
use c2r_model::{fm_loss, make_noising_sample};
use c2r_core::seeded_rng;
use ndarray::Array4;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn normal(seed: u64) -> Array4<f32> {
    let mut rng = seeded_rng(seed, 1);
    Array4::from_shape_simple_fn((2, 3, 3, 4), || StandardNormal.sample(&mut rng))
}

#[test]
fn endpoints_are_exact() {
    let (z0, eps) = (normal(0), normal(1));
    assert_eq!(interpolate(&z0, &eps, 0.0), z0);
    assert_eq!(interpolate(&z0, &eps, 1.0), eps);
}

#[test]
fn target_does_not_depend_on_t() {
    let z0 = normal(2);
    let mut rng = seeded_rng(3, 0);
    let a = make_noising_sample(&z0, &mut rng, Some(0.1));
    let mut b = a.clone();
    b.t = 0.9;
    b.z_t = interpolate(&b.z0, &b.eps, b.t);
    assert_eq!(a.target(), b.target());
    assert_eq!(a.target(), &a.eps - &z0);
}

#[test]
fn definitional_predictor_has_zero_loss() {
    let mut rng = seeded_rng(4, 0);
    let batch: Vec<_> = (0..5).map(|i| make_noising_sample(&normal(10 + i), &mut rng, None)).collect();
    let preds: Vec<_> = batch.iter().map(|s| s.target()).collect();
    assert!(fm_loss(&preds, &batch) <= 1e-7);
    let zero: Vec<_> = batch.iter().map(|s| Array4::zeros(s.z0.raw_dim())).collect();
    assert!(fm_loss(&zero, &batch) > 0.5);
}

#[test]
fn sampled_times_lie_in_unit_interval() {
    let mut rng = seeded_rng(5, 0);
    let z0 = normal(5);
    for _ in 0..1000 {
        let s = make_noising_sample(&z0, &mut rng, None);
        assert!((0.0..=1.0).contains(&s.t));
    }
}

proptest! {
    #[test]
    fn interpolant_is_linear_in_t(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let (z0, eps) = (normal(seed), normal(seed + 1));
        let z = interpolate(&z0, &eps, t);
        for ((&a, &b), &c) in z0.iter().zip(eps.iter()).zip(z.iter()) {
            let expect = (1.0 - t) * a as f64 + t * b as f64;
            prop_assert!((c as f64 - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
        }
    }
}
