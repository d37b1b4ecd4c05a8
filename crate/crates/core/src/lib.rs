//! Core data path for the coarse-to-real video toolkit.
//!
//! Everything in this crate is deterministic and free of learned weights:
//! the procedural paired corpus, the invertible latent codec, the colour
//! decorrelation used on the control branch, the frozen patch-feature
//! extractor and the proxy metrics used for evaluation.

pub mod codec;
pub mod features;
pub mod hsv;
pub mod metrics;
pub mod synthdata;

pub use codec::{CodecError, CodecStats, LatentCodec, LatentVideo};
pub use features::{ControlFeatures, FeatureError, FeatureExtractor, RandomPatchExtractor};
pub use hsv::{hsv_decorrelate, HsvParams};
pub use synthdata::{
    caption_scene, generate_pair, generate_real_clip, parse_caption, read_clip, render_scene,
    write_clip, ClipPair, Coarseness, CorpusConfig, Domain, Fidelity, SceneSpec, SpriteTrack,
    VideoClip,
};

/// Frames are stored as `[frame, row, col, rgb]`.
pub type Frames = ndarray::Array4<f32>;

/// Deterministic RNG used across the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded RNG with a stream tag so that different consumers of the same
/// user seed never share a stream.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    Rng::seed_from_u64(mixed)
}
