//! Procedural paired corpus: scene specs, fine/coarse rendering, the
//! stand-in real corpus, grammar captions and the clip directory format.

mod caption;
mod clip;
mod corpus;
mod io;
mod render;
mod scene;

use thiserror::Error;

pub use caption::{
    caption_scene, caption_vocabulary, color_hue, color_name, parse_caption, scene_attributes,
    shape_name, tokenize, CaptionAttributes, CaptionError, MotionDirection, SpriteAttributes,
    COLOR_NAMES, STILL_SPEED,
};
pub use clip::{quantize, stack_frames, Domain, SpriteTrack, VideoClip, QUANT_LEVELS};
pub use corpus::{
    generate_pair, generate_pair_corpus, generate_real_clip, generate_real_corpus, item_seed,
    pair_from_spec, real_spec, synthetic_spec, ClipPair, CorpusConfig,
};
pub use io::{frame_file_name, read_clip, write_clip, ClipIoError, CLIP_FORMAT_VERSION, META_FILE};
pub use render::{
    occupancy_mask, render_scene, sprite_masks, Fidelity, Palette, PALETTES, REAL_PALETTES,
    SYNTHETIC_PALETTES,
};
pub use scene::{
    shape_contains, Background, Coarseness, SceneSpec, Shape, Sprite, StyleFamily, Trajectory,
    TrajectoryKind, MAX_SPRITES,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
}
