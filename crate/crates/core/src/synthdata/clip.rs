use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;
use super::SynthError;

/// Frame values live on a 16-bit grid so that the PNG sidecar format is
/// lossless.
pub const QUANT_LEVELS: f32 = 65535.0;

pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * QUANT_LEVELS).round() / QUANT_LEVELS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    SyntheticFine,
    SyntheticCoarse,
    Generated,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Real => "real",
            Domain::SyntheticFine => "synthetic_fine",
            Domain::SyntheticCoarse => "synthetic_coarse",
            Domain::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(Domain::Real),
            "synthetic_fine" => Some(Domain::SyntheticFine),
            "synthetic_coarse" => Some(Domain::SyntheticCoarse),
            "generated" => Some(Domain::Generated),
            _ => None,
        }
    }

    pub fn is_synthetic(self) -> bool {
        matches!(self, Domain::SyntheticFine | Domain::SyntheticCoarse)
    }
}

/// Ground-truth path of one sprite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteTrack {
    /// Sprite radius in pixels; the structure metric uses it as its length scale.
    pub radius: f64,
    /// Per-frame `(x, y)` centre in pixels.
    pub centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Array4<f32>,
    pub caption: String,
    pub trajectories: Option<Vec<SpriteTrack>>,
    pub domain: Domain,
    pub pair_id: Option<String>,
    pub spec: Option<SceneSpec>,
}

impl VideoClip {
    /// Builds a clip, snapping pixel values onto the storage grid.
    pub fn new(
        mut frames: Array4<f32>,
        caption: impl Into<String>,
        domain: Domain,
    ) -> Result<Self, SynthError> {
        let shape = frames.shape();
        if shape[0] < 2 {
            return Err(SynthError::InvalidClip(format!(
                "clip needs at least 2 frames, got {}",
                shape[0]
            )));
        }
        if shape[3] != 3 {
            return Err(SynthError::InvalidClip(format!(
                "expected 3 colour channels, got {}",
                shape[3]
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::InvalidClip("non-finite pixel value".into()));
        }
        frames.mapv_inplace(quantize);
        Ok(Self {
            frames,
            caption: caption.into(),
            trajectories: None,
            domain,
            pair_id: None,
            spec: None,
        })
    }

    pub fn with_trajectories(mut self, tracks: Vec<SpriteTrack>) -> Self {
        self.trajectories = Some(tracks);
        self
    }

    pub fn with_pair_id(mut self, id: impl Into<String>) -> Self {
        self.pair_id = Some(id.into());
        self
    }

    pub fn with_spec(mut self, spec: SceneSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), i)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Replace the pixels, keeping metadata. Values are re-quantized.
    pub fn map_frames(&self, frames: Array4<f32>) -> Result<Self, SynthError> {
        let mut out = VideoClip::new(frames, self.caption.clone(), self.domain)?;
        out.trajectories = self.trajectories.clone();
        out.pair_id = self.pair_id.clone();
        out.spec = self.spec.clone();
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.domain.is_synthetic() && self.trajectories.is_none() {
            return Err(SynthError::InvalidClip(
                "synthetic clip without trajectories".into(),
            ));
        }
        if let Some(tracks) = &self.trajectories {
            for t in tracks {
                if t.centers.len() != self.frame_count() {
                    return Err(SynthError::InvalidClip(format!(
                        "trajectory has {} centres for {} frames",
                        t.centers.len(),
                        self.frame_count()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Stack `[H, W, 3]` frames into a clip tensor.
pub fn stack_frames(frames: &[Array3<f32>]) -> Array4<f32> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).expect("frames share a shape")
}
