use rand::Rng;
use serde::{Deserialize, Serialize};

use super::caption::COLOR_NAMES;
use super::clip::VideoClip;
use super::render::{occupancy_mask, render_scene, Fidelity, REAL_PALETTES, SYNTHETIC_PALETTES};
use super::scene::{
    Background, Coarseness, SceneSpec, Shape, Sprite, StyleFamily, Trajectory, TrajectoryKind,
};
use super::SynthError;
use crate::seeded_rng;

const STREAM_PAIR: u64 = 0x5041_4952;
const STREAM_REAL: u64 = 0x5245_414c;

/// Knobs shared by both corpus families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Sprite diameter range, fraction of frame height.
    pub size_range: (f64, f64),
    /// Speed range, fraction of frame width per frame.
    pub speed_range: (f64, f64),
    pub synthetic_sprites: (usize, usize),
    pub real_sprites: (usize, usize),
    /// Coarseness tiers drawn uniformly for synthetic pairs.
    pub coarseness: Vec<Coarseness>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            size_range: (0.22, 0.34),
            speed_range: (0.08, 0.12),
            synthetic_sprites: (1, 2),
            real_sprites: (1, 3),
            coarseness: Coarseness::ALL.to_vec(),
        }
    }
}

impl CorpusConfig {
    pub fn with_resolution(mut self, height: usize, width: usize, frames: usize) -> Self {
        self.height = height;
        self.width = width;
        self.frames = frames;
        self
    }
}

/// A coarse control clip and its fine target, rendered from one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub fine: VideoClip,
    pub coarse: VideoClip,
    pub spec: SceneSpec,
}

impl ClipPair {
    /// Checks shape equality, caption inheritance and per-frame mask identity.
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.fine.frames().dim() != self.coarse.frames().dim() {
            return Err(SynthError::InvalidClip("pair shapes differ".into()));
        }
        if self.fine.caption != self.coarse.caption {
            return Err(SynthError::InvalidClip("pair captions differ".into()));
        }
        let (fs, cs) = (self.fine.spec.as_ref(), self.coarse.spec.as_ref());
        for k in 0..self.spec.frame_count {
            let reference = occupancy_mask(&self.spec, k);
            for s in [fs, cs].into_iter().flatten() {
                if occupancy_mask(s, k) != reference {
                    return Err(SynthError::InvalidClip(format!("mask mismatch at frame {k}")));
                }
            }
        }
        Ok(())
    }
}

fn sample_sprite<R: Rng>(
    rng: &mut R,
    config: &CorpusConfig,
    style: StyleFamily,
) -> Sprite {
    let (h, w, n) = (config.height as f64, config.width as f64, config.frames);
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let color = rng.random_range(0..COLOR_NAMES.len()) as f64 / COLOR_NAMES.len() as f64;
    let (hue, saturation, value) = match style {
        StyleFamily::Synthetic => (color, 0.85, 0.9),
        StyleFamily::Real => (
            (color + rng.random_range(-0.03..0.03f64)).rem_euclid(1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.7..1.0),
        ),
    };
    let size = rng.random_range(config.size_range.0..=config.size_range.1);
    let r = 0.5 * size * h;

    let speed = rng.random_range(config.speed_range.0..=config.speed_range.1) * w;
    let off_axis = rng.random_range(-0.3..0.3) * speed;
    let (mut vx, mut vy) = match rng.random_range(0..4) {
        0 => (speed, off_axis),
        1 => (-speed, off_axis),
        2 => (off_axis, speed),
        _ => (off_axis, -speed),
    };
    let kind = match rng.random_range(0..4) {
        0 | 1 => TrajectoryKind::Linear,
        2 => TrajectoryKind::Sinusoidal,
        _ => TrajectoryKind::Bounce,
    };
    let amplitude = if kind == TrajectoryKind::Sinusoidal {
        rng.random_range(0.5..1.5) * h / 32.0
    } else {
        0.0
    };
    let period = rng.random_range(4.0..8.0);
    let steps = (n - 1) as f64;

    // Start range along one axis so the whole path stays inside
    // (linear/sinusoidal) or the first bounce happens after mid-clip.
    let mut axis = |v: &mut f64, extent: f64, margin: f64, bounce: bool| -> f64 {
        let lo = r + margin;
        let hi = extent - r - margin;
        let travel = if bounce { *v * steps * 0.5 } else { *v * steps };
        if travel.abs() > (hi - lo).max(0.0) {
            *v *= (hi - lo).max(0.0) / travel.abs();
        }
        let travel = if bounce { *v * steps * 0.5 } else { *v * steps };
        let (a, b) = if travel >= 0.0 {
            (lo, hi - travel)
        } else {
            (lo - travel, hi)
        };
        if b > a {
            rng.random_range(a..=b)
        } else if hi >= lo {
            a.min(hi)
        } else {
            0.5 * extent
        }
    };
    let bounce = kind == TrajectoryKind::Bounce;
    let x0 = axis(&mut vx, w, amplitude, bounce);
    let y0 = axis(&mut vy, h, amplitude, bounce);
    Sprite {
        shape,
        hue,
        saturation,
        value,
        size,
        trajectory: Trajectory {
            kind,
            start: [x0, y0],
            velocity: [vx, vy],
            amplitude,
            period,
        },
    }
}

fn sample_spec(seed: u64, config: &CorpusConfig, style: StyleFamily) -> SceneSpec {
    let stream = match style {
        StyleFamily::Synthetic => STREAM_PAIR,
        StyleFamily::Real => STREAM_REAL,
    };
    let mut rng = seeded_rng(seed, stream);
    let (palettes, backgrounds, sprites) = match style {
        StyleFamily::Synthetic => (
            SYNTHETIC_PALETTES,
            &[Background::Flat, Background::Stripes, Background::Checker][..],
            config.synthetic_sprites,
        ),
        StyleFamily::Real => (REAL_PALETTES, &Background::ALL[..], config.real_sprites),
    };
    let count = rng.random_range(sprites.0.max(1)..=sprites.1.clamp(sprites.0.max(1), 3));
    let palette = rng.random_range(palettes);
    let background = backgrounds[rng.random_range(0..backgrounds.len())];
    let coarseness = if config.coarseness.is_empty() {
        Coarseness::L0
    } else {
        config.coarseness[rng.random_range(0..config.coarseness.len())]
    };
    let mut spec = SceneSpec {
        seed,
        background,
        palette,
        style,
        sprites: Vec::new(),
        frame_count: config.frames,
        height: config.height,
        width: config.width,
        coarseness,
    };
    let mut best: Option<(usize, Vec<Sprite>)> = None;
    for _ in 0..SAMPLING_ATTEMPTS {
        spec.sprites = (0..count)
            .map(|_| sample_sprite(&mut rng, config, style))
            .collect();
        let cost = layout_cost(&spec);
        if cost == 0 {
            return spec;
        }
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, spec.sprites.clone()));
        }
    }
    spec.sprites = best.map(|b| b.1).unwrap_or_default();
    spec
}

const SAMPLING_ATTEMPTS: usize = 64;

/// Zero when sprites never touch and no pixel is covered in more than
/// `(frames - 1) / 2` frames, so a temporal median recovers the background.
/// Otherwise counts the offending pixels and contacts.
fn layout_cost(spec: &SceneSpec) -> usize {
    let n = spec.frame_count;
    let mut covered = ndarray::Array2::<usize>::zeros((spec.height, spec.width));
    let mut cost = 0;
    for k in 0..n {
        covered.zip_mut_with(&occupancy_mask(spec, k), |c, &m| *c += m as usize);
        for i in 0..spec.sprites.len() {
            for j in i + 1..spec.sprites.len() {
                let (a, b) = (spec.center(i, k), spec.center(j, k));
                let reach = 1.2 * (spec.sprites[i].radius_px(spec.height)
                    + spec.sprites[j].radius_px(spec.height))
                    + 2.0;
                if (a[0] - b[0]).hypot(a[1] - b[1]) < reach {
                    cost += 100;
                }
            }
        }
    }
    let limit = (n.saturating_sub(1) / 2).max(1);
    cost + covered.iter().filter(|&&c| c > limit).count()
}

/// Scene drawn from the synthetic family for `seed`.
pub fn synthetic_spec(seed: u64, config: &CorpusConfig) -> SceneSpec {
    sample_spec(seed, config, StyleFamily::Synthetic)
}

/// Scene drawn from the real-style family for `seed`.
pub fn real_spec(seed: u64, config: &CorpusConfig) -> SceneSpec {
    sample_spec(seed, config, StyleFamily::Real)
}

/// Renders a fine/coarse pair from one scene; the coarse clip inherits the
/// fine clip's caption.
pub fn pair_from_spec(spec: SceneSpec) -> Result<ClipPair, SynthError> {
    let fine = render_scene(&spec, Fidelity::Fine)?;
    let mut coarse = render_scene(&spec, Fidelity::Coarse)?;
    coarse.caption = fine.caption.clone();
    let id = format!("pair-{:016x}", spec.seed);
    Ok(ClipPair {
        fine: fine.with_pair_id(id.clone()),
        coarse: coarse.with_pair_id(id),
        spec,
    })
}

pub fn generate_pair(seed: u64, config: &CorpusConfig) -> Result<ClipPair, SynthError> {
    pair_from_spec(synthetic_spec(seed, config))
}

pub fn generate_real_clip(seed: u64, config: &CorpusConfig) -> Result<VideoClip, SynthError> {
    render_scene(&real_spec(seed, config), Fidelity::Fine)
}

/// Seed of the `index`-th item of a corpus rooted at `seed`.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    let mut x = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

pub fn generate_real_corpus(
    seed: u64,
    count: usize,
    config: &CorpusConfig,
) -> Result<Vec<VideoClip>, SynthError> {
    (0..count)
        .map(|i| generate_real_clip(item_seed(seed, i), config))
        .collect()
}

pub fn generate_pair_corpus(
    seed: u64,
    count: usize,
    config: &CorpusConfig,
) -> Result<Vec<ClipPair>, SynthError> {
    (0..count)
        .map(|i| generate_pair(item_seed(seed ^ STREAM_PAIR, i), config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn pair_generation_is_deterministic() {
        let c = CorpusConfig::default();
        assert_eq!(generate_pair(42, &c).unwrap(), generate_pair(42, &c).unwrap());
        assert_eq!(
            generate_real_clip(7, &c).unwrap(),
            generate_real_clip(7, &c).unwrap()
        );
    }

    #[test]
    fn pairs_satisfy_invariants() {
        let c = CorpusConfig::default();
        for seed in 0..40 {
            let pair = generate_pair(seed, &c).unwrap();
            pair.validate().unwrap();
            assert_eq!(pair.fine.caption, pair.coarse.caption);
            pair.fine.validate().unwrap();
        }
    }

    #[test]
    fn palette_families_are_disjoint() {
        let c = CorpusConfig::default();
        let real: HashSet<u32> = (0..300)
            .map(|s| real_spec(s, &c).palette)
            .collect();
        let synth: HashSet<u32> = (0..300)
            .map(|s| synthetic_spec(s, &c).palette)
            .collect();
        assert!(real.is_disjoint(&synth));
        assert!(real.len() > synth.len());
    }

    #[test]
    fn corpus_ratio_matches_real_heavy_sizing() {
        let real = 2_000usize;
        let pairs = 20usize;
        assert_eq!(real / pairs, 100);
        let c = CorpusConfig::default().with_resolution(16, 16, 4);
        assert_eq!(generate_real_corpus(1, 50, &c).unwrap().len(), 50);
        assert_eq!(generate_pair_corpus(1, 2, &c).unwrap().len(), 2);
    }

    #[test]
    fn sampled_specs_validate_across_resolutions() {
        for (h, w, n) in [(32, 32, 8), (16, 16, 8), (32, 48, 6)] {
            let c = CorpusConfig::default().with_resolution(h, w, n);
            for s in 0..200 {
                real_spec(s, &c).validate().unwrap();
                synthetic_spec(s, &c).validate().unwrap();
            }
        }
    }
}
