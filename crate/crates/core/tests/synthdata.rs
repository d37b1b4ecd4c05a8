use c2r_core::synthdata::*;
use ndarray::Array4;
use proptest::prelude::*;

fn circle_spec(start: [f64; 2], velocity: [f64; 2]) -> SceneSpec {
    SceneSpec {
        seed: 1,
        background: Background::Flat,
        palette: 0,
        style: StyleFamily::Synthetic,
        sprites: vec![Sprite {
            shape: Shape::Circle,
            hue: 0.5,
            saturation: 0.85,
            value: 0.9,
            size: 0.25,
            trajectory: Trajectory::linear(start, velocity),
        }],
        frame_count: 8,
        height: 32,
        width: 32,
        coarseness: Coarseness::L0,
    }
}

/// Closed-form constant-velocity kinematics, independent of the renderer.
fn kinematics(start: [f64; 2], velocity: [f64; 2], k: usize) -> [f64; 2] {
    [start[0] + velocity[0] * k as f64, start[1] + velocity[1] * k as f64]
}

fn mask_centroid(mask: &ndarray::Array2<bool>) -> [f64; 2] {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            sx += c as f64 + 0.5;
            sy += r as f64 + 0.5;
            n += 1.0;
        }
    }
    [sx / n, sy / n]
}

#[test]
fn linear_trajectory_matches_closed_form() {
    let spec = circle_spec([10.0, 10.0], [2.0, 0.0]);
    let clip = render_scene(&spec, Fidelity::Fine).unwrap();
    let track = &clip.trajectories.as_ref().unwrap()[0];
    for k in 0..8 {
        let want = kinematics([10.0, 10.0], [2.0, 0.0], k);
        assert_eq!(want, [10.0 + 2.0 * k as f64, 10.0]);
        assert_eq!(spec.center(0, k), want);
        assert_eq!(track.centers[k], want);
        let m = mask_centroid(&occupancy_mask(&spec, k));
        assert!((m[0] - want[0]).abs() < 0.25 && (m[1] - want[1]).abs() < 0.25, "{m:?}");
    }
}

#[test]
fn zero_velocity_is_static() {
    let spec = circle_spec([16.0, 16.0], [0.0, 0.0]);
    for fidelity in [Fidelity::Fine, Fidelity::Coarse] {
        let clip = render_scene(&spec, fidelity).unwrap();
        for k in 1..8 {
            assert_eq!(clip.frame(k), clip.frame(0));
        }
    }
    assert!(render_scene(&spec, Fidelity::Fine).unwrap().caption.contains("standing still"));
}

#[test]
fn invalid_specs_are_rejected_with_a_reason() {
    let mut outside = circle_spec([-40.0, 10.0], [0.0, 0.0]);
    let err = render_scene(&outside, Fidelity::Fine).unwrap_err();
    assert!(err.to_string().contains("outside the frame"), "{err}");
    outside.sprites[0].trajectory.start = [10.0, 10.0];
    outside.sprites[0].size = 0.7;
    let err = render_scene(&outside, Fidelity::Fine).unwrap_err();
    assert!(err.to_string().contains("size"), "{err}");
}

fn iou(a: &ndarray::Array2<bool>, b: &ndarray::Array2<bool>) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn pair_masks_coincide() {
    let c = CorpusConfig::default();
    for seed in 0..20 {
        let mut spec = synthetic_spec(seed, &c);
        spec.coarseness = Coarseness::L0;
        let pair = pair_from_spec(spec).unwrap();
        pair.validate().unwrap();
        assert_eq!(pair.fine.caption, pair.coarse.caption);
        assert_eq!(pair.fine.pair_id, pair.coarse.pair_id);
        for k in 0..pair.spec.frame_count {
            // L0 coarse pixels are mid-gray exactly where a sprite is.
            let from_pixels = pair
                .coarse
                .frame(k)
                .map_axis(ndarray::Axis(2), |px| (px[0] - 0.45).abs() < 1e-3);
            let fine_mask = occupancy_mask(pair.fine.spec.as_ref().unwrap(), k);
            assert_eq!(iou(&from_pixels, &fine_mask), 1.0, "seed {seed} frame {k}");
        }
    }
}

#[test]
fn generation_is_deterministic_and_real_heavy() {
    let c = CorpusConfig::default().with_resolution(16, 16, 4);
    assert_eq!(generate_pair(5, &c).unwrap(), generate_pair(5, &c).unwrap());
    assert_eq!(generate_real_clip(5, &c).unwrap(), generate_real_clip(5, &c).unwrap());
    let real = generate_real_corpus(2, 200, &c).unwrap();
    let pairs = generate_pair_corpus(2, 2, &c).unwrap();
    assert_eq!(real.len() / pairs.len(), 100);
    assert!(real.iter().all(|r| r.domain == Domain::Real));
    for r in &real {
        let p = r.spec.as_ref().unwrap().palette;
        assert!(REAL_PALETTES.contains(&p) && !SYNTHETIC_PALETTES.contains(&p));
    }
}

#[test]
fn clip_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let pair = generate_pair(3, &CorpusConfig::default()).unwrap();
    write_clip(&pair.coarse, dir.path()).unwrap();
    for k in 0..8 {
        assert!(dir.path().join(format!("frame_{k:04}.png")).is_file());
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("meta.json")).unwrap()).unwrap();
    for key in ["caption", "domain", "pair_id", "trajectories", "spec", "format_version"] {
        assert!(meta.get(key).is_some(), "{key}");
    }
    assert_eq!(meta["domain"], "synthetic_coarse");
}

#[test]
fn malformed_sidecar_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let clip = generate_real_clip(1, &CorpusConfig::default()).unwrap();
    write_clip(&clip, dir.path()).unwrap();
    let path = dir.path().join("meta.json");
    let mut meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    meta.as_object_mut().unwrap().remove("caption");
    std::fs::write(&path, serde_json::to_vec(&meta).unwrap()).unwrap();
    let err = read_clip(dir.path()).unwrap_err();
    assert!(err.to_string().contains("caption"), "{err}");
}

#[test]
fn caption_rejects_unknown_token_by_name() {
    let err = parse_caption("a red hexagon moving left on a flat background").unwrap_err();
    assert!(err.to_string().contains("hexagon"), "{err}");
}

fn attributes() -> impl Strategy<Value = CaptionAttributes> {
    let motion = prop_oneof![
        Just(MotionDirection::Right),
        Just(MotionDirection::Left),
        Just(MotionDirection::Up),
        Just(MotionDirection::Down),
        Just(MotionDirection::Still),
    ];
    let sprite = (0usize..6, 0usize..3, motion).prop_map(|(c, s, m)| SpriteAttributes {
        color: COLOR_NAMES[c].to_string(),
        shape: Shape::ALL[s],
        motion: m,
    });
    (proptest::collection::vec(sprite, 1..=3), 0usize..4).prop_map(|(sprites, b)| {
        CaptionAttributes {
            sprites,
            background: Background::ALL[b],
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clip_round_trips_through_disk(
        n in 2usize..4,
        h in 1usize..7,
        w in 1usize..7,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let frames = Array4::from_shape_fn((n, h, w, 3), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 40) as f32 / (1u64 << 24) as f32
        });
        let clip = VideoClip::new(frames, "a red circle moving left on a flat background", Domain::Real)
            .unwrap()
            .with_pair_id("p");
        let dir = tempfile::tempdir().unwrap();
        write_clip(&clip, dir.path()).unwrap();
        let back = read_clip(dir.path()).unwrap();
        prop_assert_eq!(back, clip);
    }

    #[test]
    fn captions_parse_back(attrs in attributes()) {
        let text = attrs.to_caption();
        prop_assert_eq!(parse_caption(&text).unwrap(), attrs);
        for token in tokenize(&text) {
            prop_assert!(caption_vocabulary().contains(&token.as_str()));
        }
    }

    #[test]
    fn sampled_scenes_are_valid(seed in any::<u64>()) {
        let c = CorpusConfig::default();
        let pair = generate_pair(seed, &c).unwrap();
        pair.validate().unwrap();
        let real = generate_real_clip(seed, &c).unwrap();
        real.validate().unwrap();
        prop_assert!((1..=3).contains(&real.spec.as_ref().unwrap().sprites.len()));
        prop_assert!(real.frames().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
