use c2r_model::control::{GuidanceLatent, HeadMode, InjectionMode, InjectionPolicy};
use c2r_model::{C2rModel, ModelConfig};
use ndarray::Array4;
use proptest::prelude::*;

fn model(heads: HeadMode, mode: InjectionMode, blocks: usize) -> C2rModel {
    let mut c = ModelConfig::tiny();
    c.dit.blocks = blocks;
    c.policy = InjectionPolicy { mode, heads };
    let mut m = C2rModel::new(c, 11).unwrap();
    m.perturb(0.05, 11);
    m
}

fn probe(m: &C2rModel) -> (Vec<Array4<f32>>, Vec<f64>) {
    let lat = m.latent();
    let z = (0..2)
        .map(|i| Array4::from_shape_fn((lat.frames, lat.height, lat.width, lat.channels), |(a, b, c, d)| {
            ((a * 7 + b * 5 + c * 3 + d + i) as f32 * 0.37).sin()
        }))
        .collect();
    (z, vec![0.25, 0.75])
}

#[test]
fn zero_guidance_changes_no_activation() {
    for heads in [HeadMode::Zero, HeadMode::One, HeadMode::PerBlock] {
        for mode in [InjectionMode::InputAdd, InjectionMode::FirstThird] {
            let m = model(heads, mode, 6);
            let (z, t) = probe(&m);
            let zr: Vec<_> = z.iter().collect();
            let text = m.tokenize(&["a red circle moving right on a flat background", "a blue square standing still on a noisy background"]);
            let zero = GuidanceLatent {
                values: Array4::zeros(z[0].raw_dim()),
                scale: 1.0,
            };
            let (v0, b0) = m.predict_velocity(&zr, &t, &text, None).unwrap();
            let (v1, b1) = m.predict_velocity(&zr, &t, &text, Some(&[&zero, &zero])).unwrap();
            assert_eq!(v0, v1, "{heads:?} {mode:?}");
            assert_eq!(b0, b1, "{heads:?} {mode:?}");
        }
    }
}

#[test]
fn nonzero_guidance_enters_at_the_first_injected_block() {
    for mode in [InjectionMode::InputAdd, InjectionMode::FirstThird] {
        let m = model(HeadMode::Zero, mode, 6);
        let (z, t) = probe(&m);
        let zr: Vec<_> = z.iter().collect();
        let text = m.tokenize(&["a red circle moving right on a flat background"; 2]);
        let g = GuidanceLatent {
            values: Array4::from_elem(z[0].raw_dim(), 0.5),
            scale: 1.0,
        };
        let (_, plain) = m.predict_velocity(&zr, &t, &text, None).unwrap();
        let (_, guided) = m.predict_velocity(&zr, &t, &text, Some(&[&g, &g])).unwrap();
        assert_ne!(plain[0], guided[0]);
    }
}

#[test]
fn head_counts_and_injected_blocks() {
    let p = InjectionPolicy {
        mode: InjectionMode::FirstThird,
        heads: HeadMode::PerBlock,
    };
    assert_eq!(p.injected_blocks(6), 0..2);
    assert_eq!(p.head_count(6), 2);
    let m = model(HeadMode::PerBlock, InjectionMode::FirstThird, 6);
    assert_eq!(m.heads.heads.len(), 2);
    let input = InjectionPolicy {
        mode: InjectionMode::InputAdd,
        heads: HeadMode::One,
    };
    assert_eq!(input.injected_blocks(6), 0..1);
    assert_eq!(input.head_count(6), 1);
}

#[test]
fn first_third_needs_three_blocks() {
    let p = InjectionPolicy::default();
    assert!(p.validate(2).is_err());
    assert!(p.validate(3).is_ok());
}

#[test]
fn control_parameter_counts_strictly_increase() {
    let counts: Vec<usize> = [HeadMode::Zero, HeadMode::One, HeadMode::PerBlock]
        .into_iter()
        .map(|h| {
            let mut c = ModelConfig::default();
            c.policy.heads = h;
            C2rModel::new(c, 0).unwrap().control_param_count()
        })
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    // one head is a bias-free (48 -> 128) linear map over 1x1 patches
    let head = 48 * 128;
    assert_eq!(counts[1] - counts[0], head);
    assert_eq!(counts[2] - counts[0], 2 * head);
}

proptest! {
    #[test]
    fn first_third_covers_the_ceiling_of_a_third(blocks in 3usize..40) {
        let p = InjectionPolicy::default();
        let r = p.injected_blocks(blocks);
        prop_assert_eq!(r.start, 0);
        prop_assert_eq!(r.end, blocks.div_ceil(3));
        prop_assert_eq!(p.head_count(blocks), 0);
    }
}
