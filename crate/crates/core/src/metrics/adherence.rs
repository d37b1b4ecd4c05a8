//! Prompt-adherence proxy: the fraction of caption attributes (colour, shape,
//! motion per sprite, plus background style) that can be read back from a clip.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use super::detect::{background_model, detect_blobs, track_blobs, BlobTrack};
use crate::hsv::rgb_to_hsv;
use crate::synthdata::{
    color_hue, parse_caption, real_spec, render_scene, Background, CaptionError, CorpusConfig,
    Fidelity, MotionDirection, Shape, STILL_SPEED,
};

/// A named colour matches when the detected hue is within this many cycles.
pub const HUE_TOLERANCE: f64 = 1.0 / 12.0;
const EDGE_THRESHOLD: f32 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceScore {
    pub score: f64,
    pub matched: usize,
    pub total: usize,
}

pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

pub fn color_matches(named: &str, detected_hue: f64) -> bool {
    color_hue(named).is_some_and(|h| hue_distance(h, detected_hue) <= HUE_TOLERANCE)
}

/// Bounding-box fill thresholds separating triangles, discs and squares.
pub fn classify_shape(fill_ratio: f64) -> Shape {
    if fill_ratio >= 0.88 {
        Shape::Square
    } else if fill_ratio >= 0.69 {
        Shape::Circle
    } else {
        Shape::Triangle
    }
}

fn dominant_hue(frames: &Array4<f32>, track: &BlobTrack) -> Option<f64> {
    let (mut cx, mut cy) = (0f64, 0f64);
    for (t, blob) in track.observed() {
        for &(r, c) in &blob.pixels {
            let (h, s, _) = rgb_to_hsv(frames[(t, r, c, 0)], frames[(t, r, c, 1)], frames[(t, r, c, 2)]);
            let a = 2.0 * std::f64::consts::PI * h as f64;
            cx += s as f64 * a.cos();
            cy += s as f64 * a.sin();
        }
    }
    if cx.hypot(cy) < 1e-9 {
        return None;
    }
    Some((cy.atan2(cx) / (2.0 * std::f64::consts::PI)).rem_euclid(1.0))
}

fn track_shape(track: &BlobTrack) -> Shape {
    let mut fills: Vec<f64> = track.observed().map(|(_, b)| b.fill_ratio()).collect();
    fills.sort_by(|a, b| a.total_cmp(b));
    classify_shape(fills[fills.len() / 2])
}

fn track_motion(track: &BlobTrack, frames: usize) -> MotionDirection {
    let observed: Vec<_> = track.observed().collect();
    let (t0, b0) = observed[0];
    let target = t0 + (frames / 2).max(1);
    let (t1, b1) = observed
        .iter()
        .skip(1)
        .min_by_key(|(t, _)| t.abs_diff(target))
        .copied()
        .unwrap_or((t0, b0));
    let dt = (t1 - t0).max(1) as f64;
    MotionDirection::from_displacement(
        b1.center[0] - b0.center[0],
        b1.center[1] - b0.center[1],
        STILL_SPEED * dt,
    )
}

/// Texture statistics of a background image: the fraction of horizontal and
/// vertical neighbour pairs that differ noticeably.
pub fn background_features(bg: &Array3<f32>) -> [f64; 2] {
    let (h, w, c) = bg.dim();
    let differs = |a: (usize, usize), b: (usize, usize)| {
        (0..c).any(|ch| (bg[(a.0, a.1, ch)] - bg[(b.0, b.1, ch)]).abs() > EDGE_THRESHOLD)
    };
    let mut ex = 0usize;
    let mut ey = 0usize;
    for r in 0..h {
        for col in 0..w {
            if col + 1 < w && differs((r, col), (r, col + 1)) {
                ex += 1;
            }
            if r + 1 < h && differs((r, col), (r + 1, col)) {
                ey += 1;
            }
        }
    }
    [
        ex as f64 / (h * (w - 1)).max(1) as f64,
        ey as f64 / ((h - 1) * w).max(1) as f64,
    ]
}

/// Nearest-centroid background classifier fitted on generator renders at a
/// given resolution.
#[derive(Debug, Clone)]
pub struct BackgroundClassifier {
    centroids: Vec<(Background, [f64; 2])>,
}

impl BackgroundClassifier {
    pub fn fit(height: usize, width: usize) -> Self {
        let config = CorpusConfig::default().with_resolution(height, width, 8);
        let centroids = Background::ALL
            .into_iter()
            .map(|bg| {
                let mut acc = [0.0; 2];
                let samples = 12;
                for seed in 0..samples {
                    let mut spec = real_spec(0xB6 + seed as u64, &config);
                    spec.background = bg;
                    let clip = render_scene(&spec, Fidelity::Fine).expect("generator specs are valid");
                    let f = background_features(&background_model(clip.frames()));
                    acc[0] += f[0] / samples as f64;
                    acc[1] += f[1] / samples as f64;
                }
                (bg, acc)
            })
            .collect();
        Self { centroids }
    }

    /// Shared per-resolution instance.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), BackgroundClassifier>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((height, width))
            .or_insert_with(|| Self::fit(height, width))
            .clone()
    }

    pub fn classify(&self, features: [f64; 2]) -> Background {
        self.centroids
            .iter()
            .min_by(|a, b| {
                let da = (a.1[0] - features[0]).powi(2) + (a.1[1] - features[1]).powi(2);
                let db = (b.1[0] - features[0]).powi(2) + (b.1[1] - features[1]).powi(2);
                da.total_cmp(&db)
            })
            .map(|c| c.0)
            .expect("four centroids")
    }
}

pub fn classify_background(frames: &Array4<f32>) -> Background {
    let (_, h, w, _) = frames.dim();
    BackgroundClassifier::for_resolution(h, w)
        .classify(background_features(&background_model(frames)))
}

pub fn adherence_score(frames: &Array4<f32>, caption: &str) -> Result<AdherenceScore, CaptionError> {
    let attrs = parse_caption(caption)?;
    let (n, h, w, _) = frames.dim();
    let k = attrs.sprites.len();
    let area = (h * w) as f64;
    let per_frame = detect_blobs(frames, k, (0.004 * area, 0.2 * area));
    let tracks = track_blobs(per_frame, k, 0.5 * h.max(w) as f64);

    let mut matched = 0;
    for (want, track) in attrs.sprites.iter().zip(&tracks) {
        if track.first().is_none() {
            continue;
        }
        if dominant_hue(frames, track).is_some_and(|hue| color_matches(&want.color, hue)) {
            matched += 1;
        }
        if track_shape(track) == want.shape {
            matched += 1;
        }
        if track_motion(track, n) == want.motion {
            matched += 1;
        }
    }
    if classify_background(frames) == attrs.background {
        matched += 1;
    }
    let total = attrs.count();
    Ok(AdherenceScore {
        score: matched as f64 / total as f64,
        matched,
        total,
    })
}
