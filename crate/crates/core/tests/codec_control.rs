use c2r_core::codec::{LatentCodec, LatentVideo};
use c2r_core::features::{FeatureExtractor, PatchExtractorConfig, RandomPatchExtractor};
use c2r_core::hsv::{hsv_decorrelate, hsv_decorrelate_frames, rgb_to_hsv, HsvParams};
use c2r_core::synthdata::{generate_pair, generate_real_clip, CorpusConfig};
use c2r_core::seeded_rng;
use ndarray::{Array4, Axis};
use proptest::prelude::*;
use rand::Rng;

fn calibrated() -> LatentCodec {
    LatentCodec::calibrate_on_corpus(4, &CorpusConfig::default(), 0, 32).unwrap()
}

fn random_frames(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let mut rng = seeded_rng(seed, 9);
    Array4::from_shape_fn(shape, |_| rng.random::<f32>())
}

#[test]
fn zero_frames_encode_to_negated_normalized_mean() {
    let codec = calibrated();
    let z = codec.encode_frames(&Array4::zeros((2, 32, 32, 3))).unwrap();
    let stats = codec.stats();
    for cell in z.values.lanes(Axis(3)) {
        for (ch, &v) in cell.iter().enumerate() {
            assert!((v + stats.mean[ch] / stats.std[ch]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_latent_decodes_to_mean_image() {
    let codec = calibrated();
    let zero = LatentVideo {
        values: Array4::zeros((1, 8, 8, 48)),
        factor: 4,
    };
    let img = codec.decode_raw(&zero).unwrap();
    let mean = &codec.stats().mean;
    for ((_, y, x, rgb), &v) in img.indexed_iter() {
        assert_eq!(v, mean[((y % 4) * 4 + x % 4) * 3 + rgb]);
    }
}

#[test]
fn corpus_clip_round_trips() {
    let codec = calibrated();
    let clip = generate_real_clip(4, &CorpusConfig::default()).unwrap();
    let z = codec.encode(&clip).unwrap();
    assert_eq!(z.shape(), [8, 8, 8, 48]);
    let back = codec.decode(&z).unwrap();
    let err = (&back - clip.frames()).mapv(f32::abs).fold(0f32, |a, &b| a.max(b));
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn indivisible_resolution_names_factor() {
    let err = calibrated().encode_frames(&Array4::zeros((2, 30, 32, 3))).unwrap_err();
    assert!(err.to_string().contains("f=4"), "{err}");
}

#[test]
fn static_clip_has_zero_feature_variance() {
    let mut frames = random_frames(1, (1, 32, 32, 3));
    frames = frames.broadcast((5, 32, 32, 3)).unwrap().to_owned();
    let e = RandomPatchExtractor::new(PatchExtractorConfig::default()).unwrap();
    let f = e.extract(&frames).unwrap();
    assert_eq!(f.values.dim(), (5, 4, 4, 64));
    let var = f.values.var_axis(Axis(0), 0.0);
    assert!(var.iter().all(|&v| v == 0.0));
}

/// Estimates the hue shift applied to a constant-colour frame.
fn fitted_shift(before: [f32; 3], after: [f32; 3]) -> f32 {
    let (h0, _, _) = rgb_to_hsv(before[0], before[1], before[2]);
    let (h1, _, _) = rgb_to_hsv(after[0], after[1], after[2]);
    let d = (h1 - h0).rem_euclid(1.0);
    if d >= 0.5 {
        d - 1.0
    } else {
        d
    }
}

#[test]
fn hsv_shift_is_consistent_across_frames() {
    let mut rng = seeded_rng(3, 3);
    for _ in 0..20 {
        let params = HsvParams::sample(&mut rng);
        // every frame a different saturated constant colour
        let colors: Vec<[f32; 3]> = (0..6)
            .map(|k| {
                let (r, g, b) = c2r_core::hsv::hsv_to_rgb(k as f32 / 6.0 + 0.03, 0.6, 0.6);
                [r, g, b]
            })
            .collect();
        let frames = Array4::from_shape_fn((6, 4, 4, 3), |(k, _, _, ch)| colors[k][ch]);
        let out = hsv_decorrelate_frames(&frames, &params);
        let shifts: Vec<f32> = (0..6)
            .map(|k| {
                let px = out.index_axis(Axis(0), k);
                fitted_shift(colors[k], [px[(0, 0, 0)], px[(0, 0, 1)], px[(0, 0, 2)]])
            })
            .collect();
        for s in &shifts {
            let wrapped = (s - shifts[0] + 0.5).rem_euclid(1.0) - 0.5;
            assert!(wrapped.abs() < 1e-4, "{shifts:?}");
        }
        let target = (params.hue_shift + 0.5).rem_euclid(1.0) - 0.5;
        let got = (shifts[0] - target + 0.5).rem_euclid(1.0) - 0.5;
        assert!(got.abs() < 1e-4, "{} vs {}", shifts[0], params.hue_shift);
    }
}

#[test]
fn hsv_clip_transform_keeps_metadata() {
    let pair = generate_pair(2, &CorpusConfig::default()).unwrap();
    let params = HsvParams {
        hue_shift: 0.25,
        saturation_scale: 1.2,
        value_scale: 0.8,
    };
    let out = hsv_decorrelate(&pair.fine, &params).unwrap();
    assert_eq!(out.caption, pair.fine.caption);
    assert_eq!(out.trajectories, pair.fine.trajectories);
    assert_eq!(out.frames().dim(), pair.fine.frames().dim());
    assert_eq!(hsv_decorrelate(&pair.fine, &HsvParams::IDENTITY).unwrap().frames().dim(), (8, 32, 32, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn codec_is_exactly_invertible(seed in any::<u64>(), n in 1usize..4, gh in 1usize..4, gw in 1usize..4) {
        let codec = calibrated();
        let frames = random_frames(seed, (n, 4 * gh, 4 * gw, 3));
        let z = codec.encode_frames(&frames).unwrap();
        prop_assert_eq!(z.shape(), [n, gh, gw, 48]);
        let back = codec.decode_raw(&z).unwrap();
        let err = (&back - &frames).mapv(f32::abs).fold(0f32, |a, &b| a.max(b));
        prop_assert!(err <= 1e-6);
    }

    #[test]
    fn decode_is_affine(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let codec = calibrated();
        let mut rng = seeded_rng(seed, 2);
        let mut latent = || LatentVideo {
            values: Array4::from_shape_fn((2, 2, 2, 48), |_| rng.random_range(-1.0f32..1.0)),
            factor: 4,
        };
        let (z1, z2) = (latent(), latent());
        let zero = codec.decode_raw(&LatentVideo { values: Array4::zeros((2, 2, 2, 48)), factor: 4 }).unwrap();
        let lin = |z: &LatentVideo| codec.decode_raw(z).unwrap() - &zero;
        let mix = LatentVideo { values: &z1.values * a + &z2.values * b, factor: 4 };
        let lhs = lin(&mix);
        let rhs = lin(&z1) * a + lin(&z2) * b;
        let err = (&lhs - &rhs).mapv(f32::abs).fold(0f32, |x, &y| x.max(y));
        prop_assert!(err <= 1e-5);
        // affine combinations (a + b = 1) need no offset correction
        let affine = LatentVideo { values: &z1.values * a + &z2.values * (1.0 - a), factor: 4 };
        let direct = codec.decode_raw(&affine).unwrap();
        let combo = codec.decode_raw(&z1).unwrap() * a + codec.decode_raw(&z2).unwrap() * (1.0 - a);
        let err = (&direct - &combo).mapv(f32::abs).fold(0f32, |x, &y| x.max(y));
        prop_assert!(err <= 1e-5);
    }

    #[test]
    fn hsv_value_channel_scales_exactly(seed in any::<u64>(), v in 0.7f32..=1.3, dh in -0.5f32..0.5, s in 0.5f32..=1.5) {
        let frames = random_frames(seed, (2, 3, 3, 3));
        let params = HsvParams { hue_shift: dh, saturation_scale: s, value_scale: v };
        let out = hsv_decorrelate_frames(&frames, &params);
        for (a, b) in frames.lanes(Axis(3)).into_iter().zip(out.lanes(Axis(3))) {
            let (_, _, v0) = rgb_to_hsv(a[0], a[1], a[2]);
            let (_, _, v1) = rgb_to_hsv(b[0], b[1], b[2]);
            prop_assert!((v1 - (v * v0).clamp(0.0, 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn hsv_per_frame_equals_whole_clip(seed in any::<u64>(), dh in -0.5f32..0.5) {
        let frames = random_frames(seed, (3, 4, 4, 3));
        let params = HsvParams { hue_shift: dh, ..HsvParams::IDENTITY };
        let whole = hsv_decorrelate_frames(&frames, &params);
        for k in 0..3 {
            let one = frames.slice(ndarray::s![k..k + 1, .., .., ..]).to_owned();
            let single = hsv_decorrelate_frames(&one, &params);
            prop_assert_eq!(single.index_axis(Axis(0), 0), whole.index_axis(Axis(0), k));
        }
    }
}
