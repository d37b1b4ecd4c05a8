//! Invertible latent codec: space-to-depth by a spatial factor `f` followed by
//! a fixed per-channel affine whitening. No temporal compression.
//!
//! Latent channel `c` of cell `(i, j)` holds pixel `(f*i + dy, f*j + dx)`,
//! colour `rgb`, with `c = (dy * f + dx) * 3 + rgb`.

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::{generate_pair, generate_real_clip, item_seed, CorpusConfig, VideoClip};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("resolution {height}x{width} is not divisible by the codec factor f={factor}")]
    Indivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("latent shape {got:?} inconsistent with codec (f={factor}, C={channels})")]
    Shape {
        got: Vec<usize>,
        factor: usize,
        channels: usize,
    },
    #[error("invalid codec stats: {0}")]
    Stats(String),
}

/// Calibration statistics; persisted in checkpoint manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecStats {
    pub factor: usize,
    pub channels: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// `[frames, H/f, W/f, 3 f^2]` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub values: Array4<f32>,
    pub factor: usize,
}

impl LatentVideo {
    pub fn shape(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    stats: CodecStats,
}

pub const DEFAULT_FACTOR: usize = 4;
pub const CALIBRATION_CLIPS: usize = 256;

impl LatentCodec {
    pub fn from_stats(stats: CodecStats) -> Result<Self, CodecError> {
        let c = 3 * stats.factor * stats.factor;
        if stats.factor == 0 || stats.channels != c {
            return Err(CodecError::Stats(format!(
                "channels {} != 3*f^2 for f={}",
                stats.channels, stats.factor
            )));
        }
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(CodecError::Stats("mean/std length mismatch".into()));
        }
        if stats.std.iter().any(|&s| !(s.is_finite() && s > 0.0))
            || stats.mean.iter().any(|m| !m.is_finite())
        {
            return Err(CodecError::Stats("non-finite or non-positive stats".into()));
        }
        Ok(Self { stats })
    }

    /// Unwhitened codec (mean 0, std 1); useful in tests.
    pub fn identity(factor: usize) -> Self {
        let c = 3 * factor * factor;
        Self {
            stats: CodecStats {
                factor,
                channels: c,
                mean: vec![0.0; c],
                std: vec![1.0; c],
            },
        }
    }

    /// Per-channel mean/std of the space-to-depth representation of `clips`.
    pub fn calibrate<'a>(
        factor: usize,
        clips: impl IntoIterator<Item = &'a Array4<f32>>,
    ) -> Result<Self, CodecError> {
        let raw = Self::identity(factor);
        let c = raw.stats.channels;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        let mut count = 0usize;
        for frames in clips {
            let z = raw.encode_frames(frames)?;
            for cell in z.values.lanes(ndarray::Axis(3)) {
                for (ch, &v) in cell.iter().enumerate() {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(CodecError::Stats("empty calibration set".into()));
        }
        let n = count as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Self::from_stats(CodecStats {
            factor,
            channels: c,
            mean,
            std,
        })
    }

    /// Calibrates on a fixed mix of generated real-style and synthetic clips.
    pub fn calibrate_on_corpus(
        factor: usize,
        config: &CorpusConfig,
        seed: u64,
        count: usize,
    ) -> Result<Self, CodecError> {
        let clips: Vec<VideoClip> = (0..count)
            .map(|i| {
                let s = item_seed(seed ^ 0xCA1B, i);
                if i % 2 == 0 {
                    generate_real_clip(s, config).map_err(|e| CodecError::Stats(e.to_string()))
                } else {
                    generate_pair(s, config)
                        .map(|p| p.fine)
                        .map_err(|e| CodecError::Stats(e.to_string()))
                }
            })
            .collect::<Result<_, _>>()?;
        Self::calibrate(factor, clips.iter().map(|c| c.frames()))
    }

    pub fn stats(&self) -> &CodecStats {
        &self.stats
    }

    pub fn factor(&self) -> usize {
        self.stats.factor
    }

    pub fn channels(&self) -> usize {
        self.stats.channels
    }

    pub fn latent_shape(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 4], CodecError> {
        let f = self.stats.factor;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(CodecError::Indivisible {
                height,
                width,
                factor: f,
            });
        }
        Ok([frames, height / f, width / f, self.stats.channels])
    }

    pub fn encode(&self, clip: &VideoClip) -> Result<LatentVideo, CodecError> {
        self.encode_frames(clip.frames())
    }

    pub fn encode_frames(&self, frames: &Array4<f32>) -> Result<LatentVideo, CodecError> {
        let (n, h, w, _) = frames.dim();
        let [_, lh, lw, c] = self.latent_shape(n, h, w)?;
        let f = self.stats.factor;
        let (mean, std) = (&self.stats.mean, &self.stats.std);
        let values = Array4::from_shape_fn((n, lh, lw, c), |(t, i, j, ch)| {
            let rgb = ch % 3;
            let cell = ch / 3;
            let (dy, dx) = (cell / f, cell % f);
            (frames[(t, i * f + dy, j * f + dx, rgb)] - mean[ch]) / std[ch]
        });
        Ok(LatentVideo { values, factor: f })
    }

    /// Exact inverse of [`encode_frames`](Self::encode_frames), without clamping.
    pub fn decode_raw(&self, latent: &LatentVideo) -> Result<Array4<f32>, CodecError> {
        let (n, lh, lw, c) = latent.values.dim();
        let f = self.stats.factor;
        if latent.factor != f || c != self.stats.channels {
            return Err(CodecError::Shape {
                got: latent.values.shape().to_vec(),
                factor: f,
                channels: self.stats.channels,
            });
        }
        let (mean, std) = (&self.stats.mean, &self.stats.std);
        Ok(Array4::from_shape_fn((n, lh * f, lw * f, 3), |(t, y, x, rgb)| {
            let ch = ((y % f) * f + (x % f)) * 3 + rgb;
            latent.values[(t, y / f, x / f, ch)] * std[ch] + mean[ch]
        }))
    }

    /// Pixel frames clamped to `[0, 1]`.
    pub fn decode(&self, latent: &LatentVideo) -> Result<Array4<f32>, CodecError> {
        let mut out = self.decode_raw(latent)?;
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codec() -> LatentCodec {
        let cfg = CorpusConfig::default().with_resolution(16, 16, 4);
        LatentCodec::calibrate_on_corpus(4, &cfg, 0, 16).unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let c = LatentCodec::identity(4);
        let z = c.encode_frames(&Array4::zeros((8, 32, 32, 3))).unwrap();
        assert_eq!(z.shape(), [8, 8, 8, 48]);
    }

    #[test]
    fn zero_frames_encode_to_negated_normalized_mean() {
        let c = codec();
        let z = c.encode_frames(&Array4::zeros((2, 16, 16, 3))).unwrap();
        for cell in z.values.lanes(ndarray::Axis(3)) {
            for (ch, &v) in cell.iter().enumerate() {
                assert_eq!(v, -c.stats().mean[ch] / c.stats().std[ch]);
            }
        }
    }

    #[test]
    fn zero_latent_decodes_to_mean_image() {
        let c = codec();
        let z = LatentVideo {
            values: Array4::zeros((2, 4, 4, 48)),
            factor: 4,
        };
        let x = c.decode_raw(&z).unwrap();
        for ((_, y, xx, rgb), &v) in x.indexed_iter() {
            let ch = ((y % 4) * 4 + xx % 4) * 3 + rgb;
            assert_eq!(v, c.stats().mean[ch]);
        }
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let err = LatentCodec::identity(4)
            .encode_frames(&Array4::zeros((2, 18, 16, 3)))
            .unwrap_err();
        assert!(err.to_string().contains("f=4"));
    }

    #[test]
    fn rejects_wrong_latent_channels() {
        let z = LatentVideo {
            values: Array4::zeros((2, 4, 4, 12)),
            factor: 4,
        };
        assert!(LatentCodec::identity(4).decode(&z).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Array4::from_shape_fn((2, 8, 8, 3), |_| rng.random::<f32>());
            let c = codec();
            let back = c.decode_raw(&c.encode_frames(&x).unwrap()).unwrap();
            let err = x.iter().zip(back.iter()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            prop_assert!(err <= 1e-6, "max abs err {}", err);
        }
    }
}
