//! Appearance-leakage proxy: correlation of saturation-weighted hue
//! histograms between a control clip and an output clip.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::hsv::rgb_to_hsv;

pub const HUE_BINS: usize = 16;
/// Below this mean saturation a clip carries no usable hue information.
const MIN_MEAN_SATURATION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageScore {
    pub score: f64,
    pub degenerate: bool,
}

/// Hue histogram with each pixel weighted by its saturation.
pub fn hue_histogram(frames: &Array4<f32>) -> ([f64; HUE_BINS], f64) {
    let mut hist = [0f64; HUE_BINS];
    let mut total = 0.0;
    let mut count = 0usize;
    for px in frames.lanes(ndarray::Axis(3)) {
        let (h, s, _) = rgb_to_hsv(px[0], px[1], px[2]);
        let bin = ((h * HUE_BINS as f32) as usize).min(HUE_BINS - 1);
        hist[bin] += s as f64;
        total += s as f64;
        count += 1;
    }
    (hist, total / count.max(1) as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 1e-18 || vb <= 1e-18 {
        return None;
    }
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

pub fn leakage_score(control: &Array4<f32>, output: &Array4<f32>) -> LeakageScore {
    let (hc, sat_c) = hue_histogram(control);
    let (ho, sat_o) = hue_histogram(output);
    if sat_c < MIN_MEAN_SATURATION || sat_o < MIN_MEAN_SATURATION {
        return LeakageScore {
            score: 0.0,
            degenerate: true,
        };
    }
    match pearson(&hc, &ho) {
        Some(r) => LeakageScore {
            score: r,
            degenerate: false,
        },
        None => LeakageScore {
            score: 0.0,
            degenerate: true,
        },
    }
}
