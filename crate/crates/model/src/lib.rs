//! Toy flow-matching video generator with an implicit-feature control
//! pathway, two-stage training, Euler sampling and the evaluation harness.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod text;
pub mod training;

pub use backbone::{fm_loss, make_noising_sample, DitConfig, LatentShape, NoisingSample};
pub use control::{GuidanceLatent, HeadMode, InjectionMode, InjectionPolicy};
pub use model::{C2rModel, Control, ModelConfig, ModelError};
