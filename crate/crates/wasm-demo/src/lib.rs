//! Browser demo: render a paired scene, recolour its control and score a
//! shifted copy against the ground-truth tracks.

use c2r_core::metrics::structure_score;
use c2r_core::synthdata::{pair_from_spec, synthetic_spec, Coarseness, CorpusConfig, VideoClip};
use c2r_core::{hsv_decorrelate, seeded_rng, HsvParams};
use ndarray::Array4;
use wasm_bindgen::prelude::*;

/// A rendered scene: fine clip, coarse control and the active control view.
#[wasm_bindgen]
pub struct Scene {
    fine: VideoClip,
    coarse: VideoClip,
    control: VideoClip,
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(frames: &Array4<f32>, k: usize) -> Vec<u8> {
    let (h, w) = (frames.shape()[1], frames.shape()[2]);
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((frames[(k, y, x, c)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Translates every frame by `(dx, dy)` pixels, filling with edge pixels.
fn shift(frames: &Array4<f32>, dx: i32, dy: i32) -> Array4<f32> {
    let (n, h, w, c) = frames.dim();
    Array4::from_shape_fn((n, h, w, c), |(k, y, x, ch)| {
        let sy = (y as i32 - dy).clamp(0, h as i32 - 1) as usize;
        let sx = (x as i32 - dx).clamp(0, w as i32 - 1) as usize;
        frames[(k, sy, sx, ch)]
    })
}

#[wasm_bindgen]
impl Scene {
    /// Draws a synthetic scene; `coarseness` is "L0", "L1" or "L2".
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, coarseness: &str, size: usize, frames: usize) -> Result<Scene, JsError> {
        let level = Coarseness::parse(coarseness).ok_or_else(|| js_err(format!("unknown coarseness {coarseness:?}")))?;
        let config = CorpusConfig::default().with_resolution(size, size, frames);
        let mut spec = synthetic_spec(seed as u64, &config);
        spec.coarseness = level;
        let pair = pair_from_spec(spec).map_err(js_err)?;
        Ok(Scene {
            control: pair.coarse.clone(),
            fine: pair.fine,
            coarse: pair.coarse,
        })
    }

    pub fn caption(&self) -> String {
        self.fine.caption.clone()
    }

    pub fn frame_count(&self) -> usize {
        self.fine.frame_count()
    }

    pub fn size(&self) -> usize {
        self.fine.height()
    }

    pub fn fine_rgba(&self, frame: usize) -> Vec<u8> {
        rgba(self.fine.frames(), frame)
    }

    pub fn control_rgba(&self, frame: usize) -> Vec<u8> {
        rgba(self.control.frames(), frame)
    }

    /// Applies one seeded hue/saturation/value draw to every frame of the
    /// coarse control and returns the parameters as `[dh, s, v]`.
    pub fn recolor(&mut self, seed: u32) -> Result<Vec<f32>, JsError> {
        let params = HsvParams::sample(&mut seeded_rng(seed as u64, 0));
        self.control = hsv_decorrelate(&self.coarse, &params).map_err(js_err)?;
        Ok(vec![params.hue_shift, params.saturation_scale, params.value_scale])
    }

    pub fn reset_control(&mut self) {
        self.control = self.coarse.clone();
    }

    /// Structure score of the fine clip translated by `(dx, dy)` pixels.
    pub fn shifted_score(&self, dx: i32, dy: i32) -> f64 {
        let tracks = self.fine.trajectories.clone().unwrap_or_default();
        structure_score(&shift(self.fine.frames(), dx, dy), &tracks).score
    }

    pub fn shifted_rgba(&self, frame: usize, dx: i32, dy: i32) -> Vec<u8> {
        rgba(&shift(self.fine.frames(), dx, dy), frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_clip_scores_highest() {
        let scene = Scene::new(3, "L1", 32, 4).unwrap();
        let base = scene.shifted_score(0, 0);
        assert!(base > scene.shifted_score(4, 0));
        assert_eq!(scene.fine_rgba(0).len(), 32 * 32 * 4);
    }

    #[test]
    fn recolor_keeps_shape_and_reset_restores() {
        let mut scene = Scene::new(5, "L2", 32, 4).unwrap();
        let before = scene.control_rgba(1);
        let p = scene.recolor(9).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(scene.control_rgba(1).len(), before.len());
        scene.reset_control();
        assert_eq!(scene.control_rgba(1), before);
    }
}
