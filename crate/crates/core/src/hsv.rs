//! RGB/HSV conversion and the clip-consistent colour decorrelation applied to
//! the control branch.

use ndarray::{Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::synthdata::{SynthError, VideoClip};

/// `rgb` in `[0,1]` to `(h, s, v)` with hue in cycles, `[0, 1)`.
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h6 = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let h = (h6 / 6.0).rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    (if h >= 1.0 { 0.0 } else { h }, s, v)
}

/// Inverse of [`rgb_to_hsv`]. The largest output channel is exactly `v`.
pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// One random colour transform, shared by every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvParams {
    /// Hue shift in cycles, `[-0.5, 0.5)`.
    pub hue_shift: f32,
    /// Saturation multiplier, `[0.5, 1.5]`.
    pub saturation_scale: f32,
    /// Value multiplier, `[0.7, 1.3]`.
    pub value_scale: f32,
}

impl HsvParams {
    pub const IDENTITY: HsvParams = HsvParams {
        hue_shift: 0.0,
        saturation_scale: 1.0,
        value_scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hue_shift: rng.random_range(-0.5f32..0.5),
            saturation_scale: rng.random_range(0.5f32..=1.5),
            value_scale: rng.random_range(0.7f32..=1.3),
        }
    }

    pub fn apply_pixel(&self, rgb: [f32; 3]) -> [f32; 3] {
        // skip the round trip so identity is exact
        if self.hue_shift == 0.0 && self.saturation_scale == 1.0 && self.value_scale == 1.0 {
            return rgb;
        }
        let (h, s, v) = rgb_to_hsv(rgb[0], rgb[1], rgb[2]);
        let h = (h + self.hue_shift).rem_euclid(1.0);
        let s = (s * self.saturation_scale).clamp(0.0, 1.0);
        let v = (v * self.value_scale).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        [r, g, b]
    }
}

/// Applies `params` to every pixel of every frame (`[N, H, W, 3]`).
pub fn hsv_decorrelate_frames(frames: &Array4<f32>, params: &HsvParams) -> Array4<f32> {
    let mut out = frames.clone();
    Zip::from(out.lanes_mut(ndarray::Axis(3))).for_each(|mut px| {
        let mapped = params.apply_pixel([px[0], px[1], px[2]]);
        px[0] = mapped[0];
        px[1] = mapped[1];
        px[2] = mapped[2];
    });
    out
}

/// Clip-level decorrelation; metadata is preserved.
pub fn hsv_decorrelate(clip: &VideoClip, params: &HsvParams) -> Result<VideoClip, SynthError> {
    clip.map_frames(hsv_decorrelate_frames(clip.frames(), params))
}
