//! Structure-following proxy: how closely detected moving blobs sit on the
//! ground-truth sprite centres.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use super::detect::detect_blobs;
use crate::synthdata::SpriteTrack;

/// Plausible blob area relative to the expected sprite disc `pi r^2`.
const AREA_BAND: (f64, f64) = (0.2, 3.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub score: f64,
    /// Fewer than half of the frames had any plausible blob.
    pub undetected: bool,
    pub detected_frames: usize,
}

/// Mean over frames of `exp(-d / r)` between greedily matched detections and
/// ground-truth centres, `r` being the sprite radius.
pub fn structure_score(frames: &Array4<f32>, tracks: &[SpriteTrack]) -> StructureScore {
    let n = frames.shape()[0];
    if tracks.is_empty() || n == 0 {
        return StructureScore {
            score: 0.0,
            undetected: true,
            detected_frames: 0,
        };
    }
    let mean_r2 = tracks.iter().map(|t| t.radius * t.radius).sum::<f64>() / tracks.len() as f64;
    let disc = std::f64::consts::PI * mean_r2;
    let per_frame = detect_blobs(frames, tracks.len(), (AREA_BAND.0 * disc, AREA_BAND.1 * disc));

    let mut total = 0.0;
    let mut detected_frames = 0;
    for (k, blobs) in per_frame.iter().enumerate() {
        if blobs.is_empty() {
            continue;
        }
        detected_frames += 1;
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, t) in tracks.iter().enumerate() {
            let gt = t.centers[k];
            for (bi, b) in blobs.iter().enumerate() {
                pairs.push(((b.center[0] - gt[0]).hypot(b.center[1] - gt[1]), ti, bi));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut used_t = vec![false; tracks.len()];
        let mut used_b = vec![false; blobs.len()];
        let mut frame_score = 0.0;
        for (d, ti, bi) in pairs {
            if used_t[ti] || used_b[bi] {
                continue;
            }
            used_t[ti] = true;
            used_b[bi] = true;
            frame_score += (-d / tracks[ti].radius.max(1e-6)).exp();
        }
        total += frame_score / tracks.len() as f64;
    }
    if 2 * detected_frames < n {
        return StructureScore {
            score: 0.0,
            undetected: true,
            detected_frames,
        };
    }
    StructureScore {
        score: total / n as f64,
        undetected: false,
        detected_frames,
    }
}
