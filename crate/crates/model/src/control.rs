//! Control pathway: feature resampling, the adapter, injection policies and
//! control heads.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use thiserror::Error;

pub use c2r_core::features::{
    read_features, write_features, ControlFeatures, FeatureError, FeatureExtractor, PatchExtractorConfig,
    RandomPatchExtractor,
};
pub use c2r_core::hsv::{hsv_decorrelate, hsv_decorrelate_frames, HsvParams};

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::nn::Linear;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("injection policy {policy} needs at least {needed} blocks, model has {blocks}")]
    PolicyBlocks {
        policy: InjectionPolicy,
        needed: usize,
        blocks: usize,
    },
    #[error("guidance shape {got:?} does not match latent shape {expected:?}")]
    Shape { got: Vec<usize>, expected: Vec<usize> },
    #[error("unknown {what} {value:?}")]
    Parse { what: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    InputAdd,
    FirstThird,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Guidance enters through the frozen patch embedding.
    Zero,
    /// One shared projection.
    One,
    /// One projection per injected block.
    PerBlock,
}

impl HeadMode {
    pub const ALL: [HeadMode; 3] = [HeadMode::Zero, HeadMode::One, HeadMode::PerBlock];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Zero => "zero",
            HeadMode::One => "one",
            HeadMode::PerBlock => "per_block",
        }
    }
}

impl FromStr for HeadMode {
    type Err = ControlError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        HeadMode::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| ControlError::Parse {
                what: "head mode",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPolicy {
    pub mode: InjectionMode,
    pub heads: HeadMode,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self {
            mode: InjectionMode::FirstThird,
            heads: HeadMode::Zero,
        }
    }
}

impl fmt::Display for InjectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            InjectionMode::InputAdd => "input_add",
            InjectionMode::FirstThird => "first_third",
        };
        write!(f, "{mode}+{}", self.heads.as_str())
    }
}

impl InjectionPolicy {
    /// Blocks whose input receives guidance.
    pub fn injected_blocks(&self, blocks: usize) -> Range<usize> {
        match self.mode {
            InjectionMode::InputAdd => 0..1,
            InjectionMode::FirstThird => 0..blocks.div_ceil(3),
        }
    }

    pub fn head_count(&self, blocks: usize) -> usize {
        match self.heads {
            HeadMode::Zero => 0,
            HeadMode::One => 1,
            HeadMode::PerBlock => self.injected_blocks(blocks).len(),
        }
    }

    pub fn validate(&self, blocks: usize) -> Result<(), ControlError> {
        let needed = match self.mode {
            InjectionMode::InputAdd => 1,
            InjectionMode::FirstThird => 3,
        };
        if blocks < needed {
            return Err(ControlError::PolicyBlocks {
                policy: *self,
                needed,
                blocks,
            });
        }
        Ok(())
    }
}

/// Adapter output shaped like the latent, with its fusion scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceLatent {
    pub values: Array4<f32>,
    pub scale: f32,
}

/// Bilinear resize of `[n, h, w, c]` features to `[n, out_h, out_w, c]`
/// with half-pixel centres and edge clamping. Identity in time.
pub fn resize_features(features: &Array4<f32>, out_h: usize, out_w: usize) -> Array4<f32> {
    let (n, h, w, c) = features.dim();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut out = Array4::zeros((n, out_h, out_w, c));
    for f in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                for k in 0..c {
                    let a = features[[f, y0, x0, k]] * (1.0 - fx) + features[[f, y0, x1, k]] * fx;
                    let b = features[[f, y1, x0, k]] * (1.0 - fx) + features[[f, y1, x1, k]] * fx;
                    out[[f, oy, ox, k]] = a * (1.0 - fy) + b * fy;
                }
            }
        }
    }
    out
}

/// Per-location two-layer perceptron from feature channels to latent
/// channels. The output layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        feature_channels: usize,
        hidden: usize,
        latent_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, "adapter.fc1", feature_channels, hidden, true, Init::Xavier, rng),
            fc2: Linear::new(store, "adapter.fc2", hidden, latent_channels, true, Init::Zeros, rng),
        }
    }

    /// `features [b, n, h', w', cf]` (already resampled) to guidance
    /// `[b, n, h', w', c]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Var {
        let h = self.fc1.forward(g, store, features);
        let h = g.silu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Token-space projections of the patchified guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlHeads {
    pub policy: InjectionPolicy,
    pub heads: Vec<Linear>,
    /// Frozen patch-embedding weight used for direct addition.
    pub patch_weight: ParamId,
}

impl ControlHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        policy: InjectionPolicy,
        blocks: usize,
        patch_dim: usize,
        width: usize,
        patch_weight: ParamId,
        rng: &mut R,
    ) -> Self {
        let heads = (0..policy.head_count(blocks))
            .map(|i| Linear::new(store, &format!("heads.h{i}"), patch_dim, width, false, Init::Xavier, rng))
            .collect();
        Self {
            policy,
            heads,
            patch_weight,
        }
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(Linear::param_count).sum()
    }

    /// Projects patchified guidance `[b, s, patch_dim]` for the `k`-th
    /// injected block.
    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, k: usize, guidance: Var) -> Var {
        match self.policy.heads {
            HeadMode::Zero => {
                let w = g.param(store, self.patch_weight);
                g.matmul(guidance, w, false, false)
            }
            HeadMode::One => self.heads[0].forward(g, store, guidance),
            HeadMode::PerBlock => self.heads[k].forward(g, store, guidance),
        }
    }
}

/// `x + head(scale * guidance)` for block inputs `x [b, s, d]` and
/// patchified guidance `[b, s, patch_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    heads: &ControlHeads,
    k: usize,
    x: Var,
    guidance: Var,
    scale: f32,
) -> Var {
    let scaled = if scale == 1.0 { guidance } else { g.scale(guidance, T::of(scale as f64)) };
    let p = heads.project(g, store, k, scaled);
    g.add(x, p)
}

/// Resampled features as a graph-ready `[b, n, h', w', cf]` tensor.
pub fn feature_batch<T: Scalar>(items: &[&Array4<f32>]) -> Tensor<T> {
    crate::backbone::stack(items)
}
