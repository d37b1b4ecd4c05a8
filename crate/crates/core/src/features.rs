//! Implicit per-frame control features.
//!
//! The default extractor is a frozen random orthogonal projection of
//! non-overlapping patches. Each frame is processed on its own, so feature
//! slice `i` depends on frame `i` only. Features computed elsewhere can be
//! ingested through the feature-file format (`<stem>.json` header plus
//! `<stem>.bin` little-endian `f32` payload).

use ndarray::{Array4, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::seeded_rng;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("resolution {height}x{width} is not divisible by patch size {patch}")]
    Indivisible {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("cannot build {channels} orthogonal directions in a {dim}-dimensional patch space")]
    TooManyChannels { channels: usize, dim: usize },
    #[error("feature file {path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `[N, Hf, Wf, Cf]` feature grid of a control clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFeatures {
    pub values: Array4<f32>,
    pub extractor_id: String,
    pub config_hash: String,
}

impl ControlFeatures {
    pub fn frame_count(&self) -> usize {
        self.values.shape()[0]
    }
}

pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn config_hash(&self) -> String;
    fn patch(&self) -> usize;
    fn channels(&self) -> usize;
    fn extract(&self, frames: &Array4<f32>) -> Result<ControlFeatures, FeatureError>;

    fn grid(&self, height: usize, width: usize) -> Result<(usize, usize), FeatureError> {
        let p = self.patch();
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) {
            return Err(FeatureError::Indivisible {
                height,
                width,
                patch: p,
            });
        }
        Ok((height / p, width / p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchExtractorConfig {
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for PatchExtractorConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            channels: 64,
            seed: 0xD1A0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomPatchExtractor {
    config: PatchExtractorConfig,
    /// Row-major `[channels, 3 * patch^2]`, orthonormal rows.
    projection: Vec<f32>,
}

impl RandomPatchExtractor {
    pub fn new(config: PatchExtractorConfig) -> Result<Self, FeatureError> {
        let dim = 3 * config.patch * config.patch;
        if config.channels > dim || config.channels == 0 {
            return Err(FeatureError::TooManyChannels {
                channels: config.channels,
                dim,
            });
        }
        let mut rng = seeded_rng(config.seed, 0xFEA7);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(config.channels);
        while rows.len() < config.channels {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            // modified Gram-Schmidt, twice for stability
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        Ok(Self {
            projection: rows.into_iter().flatten().map(|v| v as f32).collect(),
            config,
        })
    }

    pub fn config(&self) -> &PatchExtractorConfig {
        &self.config
    }

    fn extract_frame(&self, frame: ArrayView3<'_, f32>, out: &mut ndarray::ArrayViewMut3<'_, f32>) {
        let p = self.config.patch;
        let dim = 3 * p * p;
        let (h, w, _) = frame.dim();
        let count = (h * w) as f32;
        let mut mean = [0f32; 3];
        for px in frame.lanes(Axis(2)) {
            for c in 0..3 {
                mean[c] += px[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut patch = vec![0f32; dim];
        for gi in 0..h / p {
            for gj in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            patch[(dy * p + dx) * 3 + c] = frame[(gi * p + dy, gj * p + dx, c)] - mean[c];
                        }
                    }
                }
                for k in 0..self.config.channels {
                    let row = &self.projection[k * dim..(k + 1) * dim];
                    out[(gi, gj, k)] = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                }
            }
        }
    }
}

impl FeatureExtractor for RandomPatchExtractor {
    fn id(&self) -> String {
        format!(
            "random-patch-p{}-c{}",
            self.config.patch, self.config.channels
        )
    }

    fn config_hash(&self) -> String {
        let text = serde_json::to_string(&self.config).unwrap_or_default();
        format!("{:016x}", fnv1a(text.as_bytes()))
    }

    fn patch(&self) -> usize {
        self.config.patch
    }

    fn channels(&self) -> usize {
        self.config.channels
    }

    fn extract(&self, frames: &Array4<f32>) -> Result<ControlFeatures, FeatureError> {
        let (n, h, w, _) = frames.dim();
        let (gh, gw) = self.grid(h, w)?;
        let mut values = Array4::<f32>::zeros((n, gh, gw, self.config.channels));
        for (frame, mut out) in frames.outer_iter().zip(values.outer_iter_mut()) {
            self.extract_frame(frame, &mut out);
        }
        Ok(ControlFeatures {
            values,
            extractor_id: self.id(),
            config_hash: self.config_hash(),
        })
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFileHeader {
    pub extractor_id: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Hf")]
    pub hf: usize,
    #[serde(rename = "Wf")]
    pub wf: usize,
    #[serde(rename = "Cf")]
    pub cf: usize,
}

fn feature_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_features(stem: &Path, features: &ControlFeatures) -> Result<(), FeatureError> {
    let (json_path, bin_path) = feature_paths(stem);
    let (n, hf, wf, cf) = features.values.dim();
    let header = FeatureFileHeader {
        extractor_id: features.extractor_id.clone(),
        n,
        hf,
        wf,
        cf,
    };
    let text = serde_json::to_vec_pretty(&header).map_err(|e| FeatureError::File {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    std::fs::write(&json_path, text).map_err(|source| FeatureError::Io {
        path: json_path,
        source,
    })?;
    let bytes: Vec<u8> = features.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin_path, bytes).map_err(|source| FeatureError::Io {
        path: bin_path,
        source,
    })
}

/// Loads externally computed features; the header fixes the tensor shape.
pub fn read_features(stem: &Path) -> Result<ControlFeatures, FeatureError> {
    let (json_path, bin_path) = feature_paths(stem);
    let text = std::fs::read(&json_path).map_err(|source| FeatureError::Io {
        path: json_path.clone(),
        source,
    })?;
    let header: FeatureFileHeader =
        serde_json::from_slice(&text).map_err(|e| FeatureError::File {
            path: json_path.clone(),
            reason: e.to_string(),
        })?;
    let bytes = std::fs::read(&bin_path).map_err(|source| FeatureError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let expected = header.n * header.hf * header.wf * header.cf;
    if bytes.len() != expected * 4 {
        return Err(FeatureError::File {
            path: bin_path,
            reason: format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(FeatureError::File {
            path: bin_path,
            reason: "non-finite value".into(),
        });
    }
    let values = Array4::from_shape_vec((header.n, header.hf, header.wf, header.cf), data)
        .map_err(|e| FeatureError::File {
            path: bin_path,
            reason: e.to_string(),
        })?;
    Ok(ControlFeatures {
        values,
        config_hash: format!("{:016x}", fnv1a(&text)),
        extractor_id: header.extractor_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn extractor() -> RandomPatchExtractor {
        RandomPatchExtractor::new(PatchExtractorConfig::default()).unwrap()
    }

    fn noise_frames(n: usize, seed: u64) -> Array4<f32> {
        use rand::Rng;
        let mut rng = seeded_rng(seed, 1);
        Array4::from_shape_fn((n, 32, 32, 3), |_| rng.random::<f32>())
    }

    #[test]
    fn grid_shape() {
        let f = extractor().extract(&noise_frames(3, 0)).unwrap();
        assert_eq!(f.values.dim(), (3, 4, 4, 64));
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let e = extractor();
        let dim = 192;
        for a in 0..64 {
            for b in 0..64 {
                let d: f32 = (0..dim)
                    .map(|i| e.projection[a * dim + i] * e.projection[b * dim + i])
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-4, "{a},{b}: {d}");
            }
        }
    }

    #[test]
    fn identical_frames_give_identical_slices() {
        let mut frames = noise_frames(4, 2);
        let first = frames.index_axis(Axis(0), 0).to_owned();
        frames.index_axis_mut(Axis(0), 3).assign(&first);
        let f = extractor().extract(&frames).unwrap();
        assert_eq!(f.values.index_axis(Axis(0), 0), f.values.index_axis(Axis(0), 3));
    }

    #[test]
    fn slices_depend_only_on_their_frame() {
        let frames = noise_frames(4, 3);
        let mut perturbed = frames.clone();
        perturbed.index_axis_mut(Axis(0), 2).mapv_inplace(|v| 1.0 - v);
        let e = extractor();
        let a = e.extract(&frames).unwrap();
        let b = e.extract(&perturbed).unwrap();
        for i in [0, 1, 3] {
            assert_eq!(a.values.index_axis(Axis(0), i), b.values.index_axis(Axis(0), i));
        }
        assert_ne!(a.values.index_axis(Axis(0), 2), b.values.index_axis(Axis(0), 2));
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let err = extractor().extract(&Array4::zeros((2, 30, 32, 3))).unwrap_err();
        assert!(matches!(err, FeatureError::Indivisible { patch: 8, .. }));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("clip0");
        let f = extractor().extract(&noise_frames(2, 4)).unwrap();
        write_features(&stem, &f).unwrap();
        let g = read_features(&stem).unwrap();
        assert_eq!(g.values, f.values);
        assert_eq!(g.extractor_id, f.extractor_id);
        let header: serde_json::Value =
            serde_json::from_slice(&std::fs::read(stem.with_extension("json")).unwrap()).unwrap();
        for key in ["extractor_id", "N", "Hf", "Wf", "Cf"] {
            assert!(header.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn truncated_feature_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("clip1");
        let f = extractor().extract(&noise_frames(2, 5)).unwrap();
        write_features(&stem, &f).unwrap();
        let bin = stem.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_features(&stem).is_err());
    }
}
