//! On-disk clip format: `<dir>/frame_0000.png ...` (16-bit RGB) plus
//! `<dir>/meta.json`.

use image::{ImageBuffer, Rgb};
use ndarray::Array4;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use thiserror::Error;

use super::clip::{Domain, SpriteTrack, VideoClip, QUANT_LEVELS};
use super::scene::SceneSpec;

pub const CLIP_FORMAT_VERSION: u64 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Error)]
pub enum ClipIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("meta.json is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("meta.json is missing field \"{0}\"")]
    MissingField(&'static str),
    #[error("meta.json field \"{field}\" is invalid: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("clip directory {0} contains no frames")]
    NoFrames(PathBuf),
    #[error("frame {index} has size {got:?}, expected {expected:?}")]
    FrameSize {
        index: usize,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error(transparent)]
    Clip(#[from] super::SynthError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ClipIoError + '_ {
    move |source| ClipIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

pub fn write_clip(clip: &VideoClip, dir: &Path) -> Result<(), ClipIoError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (n, h, w) = (clip.frame_count(), clip.height(), clip.width());
    let frames = clip.frames();
    for k in 0..n {
        let img: ImageBuffer<Rgb<u16>, Vec<u16>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let px = |c: usize| {
                    (frames[(k, y as usize, x as usize, c)] * QUANT_LEVELS).round() as u16
                };
                Rgb([px(0), px(1), px(2)])
            });
        let path = dir.join(frame_file_name(k));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| ClipIoError::Image { path, source })?;
    }
    let meta = json!({
        "format_version": CLIP_FORMAT_VERSION,
        "caption": clip.caption,
        "domain": clip.domain.as_str(),
        "pair_id": clip.pair_id,
        "trajectories": clip.trajectories,
        "spec": clip.spec,
        "frames": n,
        "height": h,
        "width": w,
    });
    let path = dir.join(META_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&path))?;
    Ok(())
}

fn field<'a>(meta: &'a Value, name: &'static str) -> Result<&'a Value, ClipIoError> {
    match meta.get(name) {
        None => Err(ClipIoError::MissingField(name)),
        Some(v) => Ok(v),
    }
}

fn optional<T: serde::de::DeserializeOwned>(
    meta: &Value,
    name: &'static str,
) -> Result<Option<T>, ClipIoError> {
    match meta.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| ClipIoError::InvalidField {
                field: name,
                reason: e.to_string(),
            }),
    }
}

pub fn read_clip(dir: &Path) -> Result<VideoClip, ClipIoError> {
    let meta_path = dir.join(META_FILE);
    let raw = std::fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let meta: Value = serde_json::from_slice(&raw)?;

    let version = field(&meta, "format_version")?
        .as_u64()
        .ok_or(ClipIoError::InvalidField {
            field: "format_version",
            reason: "not an unsigned integer".into(),
        })?;
    if version != CLIP_FORMAT_VERSION {
        return Err(ClipIoError::InvalidField {
            field: "format_version",
            reason: format!("unsupported version {version}"),
        });
    }
    let caption = field(&meta, "caption")?
        .as_str()
        .ok_or(ClipIoError::InvalidField {
            field: "caption",
            reason: "not a string".into(),
        })?
        .to_string();
    let domain_str = field(&meta, "domain")?.as_str().unwrap_or("");
    let domain = Domain::parse(domain_str).ok_or_else(|| ClipIoError::InvalidField {
        field: "domain",
        reason: format!("unknown domain {domain_str:?}"),
    })?;
    let pair_id: Option<String> = optional(&meta, "pair_id")?;
    let trajectories: Option<Vec<SpriteTrack>> = optional(&meta, "trajectories")?;
    let spec: Option<SceneSpec> = optional(&meta, "spec")?;

    let mut images = Vec::new();
    loop {
        let path = dir.join(frame_file_name(images.len()));
        if !path.exists() {
            break;
        }
        let img = image::open(&path)
            .map_err(|source| ClipIoError::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb16();
        images.push(img);
    }
    if images.is_empty() {
        return Err(ClipIoError::NoFrames(dir.to_path_buf()));
    }
    let (w, h) = images[0].dimensions();
    let mut frames = Array4::<f32>::zeros((images.len(), h as usize, w as usize, 3));
    for (k, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(ClipIoError::FrameSize {
                index: k,
                got: img.dimensions(),
                expected: (w, h),
            });
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                frames[(k, y as usize, x as usize, c)] = px.0[c] as f32 / QUANT_LEVELS;
            }
        }
    }
    let mut clip = VideoClip::new(frames, caption, domain)?;
    clip.pair_id = pair_id;
    clip.trajectories = trajectories;
    clip.spec = spec;
    clip.validate()?;
    Ok(clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_pair, CorpusConfig};

    #[test]
    fn eight_frame_clip_layout() {
        let dir = tempfile::tempdir().unwrap();
        let pair = generate_pair(5, &CorpusConfig::default()).unwrap();
        write_clip(&pair.fine, dir.path()).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names.len(), 9);
        assert_eq!(names[0], "frame_0000.png");
        assert_eq!(names[7], "frame_0007.png");
        assert_eq!(names[8], "meta.json");
        let back = read_clip(dir.path()).unwrap();
        assert_eq!(back.frames(), pair.fine.frames());
        assert_eq!(back.spec, pair.fine.spec);
        assert_eq!(back.trajectories, pair.fine.trajectories);
        assert_eq!(back, pair.fine);
    }

    #[test]
    fn missing_caption_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let pair = generate_pair(6, &CorpusConfig::default()).unwrap();
        write_clip(&pair.coarse, dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let mut meta: Value = serde_json::from_slice(&std::fs::read(&meta_path).unwrap()).unwrap();
        meta.as_object_mut().unwrap().remove("caption");
        std::fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        let err = read_clip(dir.path()).unwrap_err();
        assert!(matches!(err, ClipIoError::MissingField("caption")));
        assert!(err.to_string().contains("\"caption\""));
    }

    #[test]
    fn bad_domain_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let pair = generate_pair(6, &CorpusConfig::default()).unwrap();
        write_clip(&pair.fine, dir.path()).unwrap();
        let meta_path = dir.path().join(META_FILE);
        let text = std::fs::read_to_string(&meta_path)
            .unwrap()
            .replace("synthetic_fine", "martian");
        std::fs::write(&meta_path, text).unwrap();
        let err = read_clip(dir.path()).unwrap_err().to_string();
        assert!(err.contains("domain"), "{err}");
    }
}
