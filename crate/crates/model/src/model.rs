//! The full generator: text encoder, DiT backbone and control pathway over
//! one shared parameter store.

use ndarray::Array4;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use c2r_core::codec::{CodecError, LatentCodec};
use c2r_core::features::{FeatureError, FeatureExtractor, PatchExtractorConfig, RandomPatchExtractor};
use c2r_core::seeded_rng;

use crate::autodiff::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::backbone::{stack, unstack, Dit, DitConfig, DitOutput, LatentShape};
use crate::control::{fuse, resize_features, Adapter, ControlError, ControlHeads, GuidanceLatent, InjectionPolicy};
use crate::text::{TextBatch, TextEmbedding, TextEncoder, Tokenizer};

pub const GROUPS: [&str; 4] = ["backbone", "text", "adapter", "heads"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub codec_factor: usize,
    pub dit: DitConfig,
    pub text_heads: usize,
    pub feature_patch: usize,
    pub feature_channels: usize,
    pub feature_seed: u64,
    pub adapter_hidden: usize,
    pub policy: InjectionPolicy,
    pub guidance_scale: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            codec_factor: 4,
            dit: DitConfig::default(),
            text_heads: 4,
            feature_patch: 8,
            feature_channels: 64,
            feature_seed: PatchExtractorConfig::default().seed,
            adapter_hidden: 128,
            policy: InjectionPolicy::default(),
            guidance_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn latent(&self) -> LatentShape {
        let f = self.codec_factor;
        LatentShape {
            frames: self.frames,
            height: self.height / f,
            width: self.width / f,
            channels: 3 * f * f,
        }
    }

    pub fn extractor_config(&self) -> PatchExtractorConfig {
        PatchExtractorConfig {
            patch: self.feature_patch,
            channels: self.feature_channels,
            seed: self.feature_seed,
        }
    }

    /// Shrunken model for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            frames: 2,
            height: 8,
            width: 8,
            codec_factor: 2,
            dit: DitConfig {
                blocks: 3,
                width: 16,
                heads: 2,
                patch: 2,
                mlp_ratio: 2,
                text_len: 8,
            },
            text_heads: 2,
            feature_patch: 4,
            feature_channels: 8,
            feature_seed: 7,
            adapter_hidden: 8,
            policy: InjectionPolicy::default(),
            guidance_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let f = self.codec_factor;
        if f == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(CodecError::Indivisible {
                height: self.height,
                width: self.width,
                factor: f,
            }
            .into());
        }
        let lat = self.latent();
        let p = self.dit.patch;
        if p == 0 || !lat.height.is_multiple_of(p) || !lat.width.is_multiple_of(p) {
            return Err(ModelError::Config(format!(
                "latent {}x{} not divisible by patch {p}",
                lat.height, lat.width
            )));
        }
        if !self.dit.width.is_multiple_of(self.dit.heads) || !self.dit.width.is_multiple_of(self.text_heads) {
            return Err(ModelError::Config("width must be divisible by the head counts".into()));
        }
        if self.frames < 2 {
            return Err(ModelError::Config("frames must be at least 2".into()));
        }
        self.policy.validate(self.dit.blocks)?;
        RandomPatchExtractor::new(self.extractor_config())?.grid(self.height, self.width)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct C2rModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub tokenizer: Tokenizer,
    pub text: TextEncoder,
    pub dit: Dit,
    pub adapter: Adapter,
    pub heads: ControlHeads,
    pub extractor: RandomPatchExtractor,
}

/// Control input to a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Control {
    None,
    /// Resampled features `[b, n, h', w', cf]`, passed through the adapter.
    Features(Var),
    /// A guidance latent `[b, n, h', w', c]` with its scale.
    Guidance(Var, f32),
}

impl C2rModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 0x4D4F_4445);
        let mut params = ParamStore::new();
        let tokenizer = Tokenizer::default();
        let d = config.dit.width;
        let text = TextEncoder::new(
            &mut params,
            tokenizer.vocab_size(),
            d,
            config.text_heads,
            config.dit.text_len,
            &mut rng,
        );
        let dit = Dit::new(&mut params, config.dit.clone(), config.latent(), &mut rng);
        let adapter = Adapter::new(
            &mut params,
            config.feature_channels,
            config.adapter_hidden,
            config.latent().channels,
            &mut rng,
        );
        let heads = ControlHeads::new(
            &mut params,
            config.policy,
            config.dit.blocks,
            dit.patch_dim(),
            d,
            dit.patch_embed.w,
            &mut rng,
        );
        let extractor = RandomPatchExtractor::new(config.extractor_config())?;
        Ok(Self {
            config,
            params,
            tokenizer,
            text,
            dit,
            adapter,
            heads,
            extractor,
        })
    }

    pub fn latent(&self) -> LatentShape {
        self.config.latent()
    }

    /// Trainable scalars in the adapter and control heads.
    pub fn control_param_count(&self) -> usize {
        self.adapter.param_count() + self.heads.param_count()
    }

    /// Freezes everything except the given groups.
    pub fn train_only(&mut self, groups: &[&str]) {
        self.params.freeze_all();
        for g in groups {
            self.params.set_trainable(g, true);
        }
    }

    /// Copies every parameter of `groups` from `other` by name.
    pub fn copy_groups(&mut self, other: &ParamStore<f32>, groups: &[&str]) -> Result<(), ModelError> {
        let names: Vec<(String, crate::autodiff::ParamId)> = self
            .params
            .iter()
            .filter(|(_, p)| groups.contains(&crate::autodiff::group_of(&p.name)))
            .map(|(id, p)| (p.name.clone(), id))
            .collect();
        for (name, id) in names {
            let src = other
                .find(&name)
                .ok_or_else(|| ModelError::Config(format!("parameter {name} missing from source")))?;
            let v = &other.value(src);
            if v.shape != self.params.value(id).shape {
                return Err(ModelError::Config(format!("parameter {name} has shape {:?}", v.shape)));
            }
            *self.params.value_mut(id) = (*v).clone();
        }
        Ok(())
    }

    pub fn tokenize(&self, captions: &[&str]) -> TextBatch {
        let seqs: Vec<Vec<usize>> = captions.iter().map(|c| self.tokenizer.encode(c)).collect();
        TextBatch::new(&seqs, self.config.dit.text_len)
    }

    /// Per-frame features of a control clip, resampled to the latent grid.
    pub fn control_features(&self, frames: &Array4<f32>) -> Result<Array4<f32>, ModelError> {
        let f = self.extractor.extract(frames)?;
        let lat = self.latent();
        Ok(resize_features(&f.values, lat.height, lat.width))
    }

    /// Forward pass on an existing graph.
    pub fn velocity<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        t: &[f64],
        text: &TextBatch,
        control: Control,
    ) -> DitOutput {
        let enc = self.text.forward(g, store, text);
        let guidance = match control {
            Control::None => None,
            Control::Features(f) => Some((self.adapter.forward(g, store, f), self.config.guidance_scale)),
            Control::Guidance(v, s) => Some((v, s)),
        };
        let guidance = guidance.map(|(v, s)| {
            let gs = g.shape(v).to_vec();
            assert_eq!(&gs[1..], &self.latent().dims(), "guidance shape mismatch");
            (self.dit.patchify(g, v), s)
        });
        let injected = self.heads.policy.injected_blocks(self.config.dit.blocks);
        let heads = &self.heads;
        let mut inject = |g: &mut Graph<T>, block: usize, x: Var| -> Var {
            match guidance {
                Some((gv, s)) if injected.contains(&block) => fuse(g, store, heads, block - injected.start, x, gv, s),
                _ => x,
            }
        };
        self.dit.forward(g, store, z_t, t, enc, &text.mask, &mut inject)
    }

    /// Velocity prediction for a batch of latents; optional per-item
    /// guidance latents. Also returns the block inputs.
    pub fn predict_velocity(
        &self,
        z_t: &[&Array4<f32>],
        t: &[f64],
        text: &TextBatch,
        guidance: Option<&[&GuidanceLatent]>,
    ) -> Result<(Vec<Array4<f32>>, Vec<Tensor<f32>>), ModelError> {
        let mut g = Graph::new();
        let z = g.constant(stack(z_t));
        let control = match guidance {
            None => Control::None,
            Some(gl) => {
                let expected = z_t[0].shape().to_vec();
                if let Some(bad) = gl.iter().find(|x| x.values.shape() != expected.as_slice()) {
                    return Err(ControlError::Shape {
                        got: bad.values.shape().to_vec(),
                        expected,
                    }
                    .into());
                }
                let scale = gl[0].scale;
                let vals: Vec<&Array4<f32>> = gl.iter().map(|x| &x.values).collect();
                Control::Guidance(g.constant(stack(&vals)), scale)
            }
        };
        let out = self.velocity(&mut g, &self.params, z, t, text, control);
        let v = unstack(g.value(out.velocity));
        let inputs = out.block_inputs.iter().map(|&b| g.value(b).clone()).collect();
        Ok((v, inputs))
    }

    /// Guidance latent for one control clip.
    pub fn adapt(&self, features: &Array4<f32>) -> GuidanceLatent {
        let mut g = Graph::<f32>::new();
        let f = g.constant(stack(&[features]));
        let out = self.adapter.forward(&mut g, &self.params, f);
        GuidanceLatent {
            values: unstack_one(g.value(out)),
            scale: self.config.guidance_scale,
        }
    }

    /// Encoder output for one caption.
    pub fn embed_text(&self, caption: &str) -> TextEmbedding {
        let batch = self.tokenize(&[caption]);
        let mut g = Graph::<f32>::new();
        let enc = self.text.forward(&mut g, &self.params, &batch);
        let v = g.value(enc.tokens);
        TextEmbedding {
            tokens: Tensor::new(vec![batch.len, self.text.width], v.data.clone()),
            mask: batch.mask,
        }
    }

    /// Adds Gaussian noise of the given size to every parameter; used to
    /// move zero-initialised layers off their degenerate starting point in
    /// tests.
    pub fn perturb(&mut self, std: f64, seed: u64) {
        let mut rng = seeded_rng(seed, 0x5045_5254);
        let d = Normal::new(0.0, std).expect("valid std");
        let ids: Vec<_> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            for v in &mut self.params.value_mut(id).data {
                *v += d.sample(&mut rng) as f32;
            }
        }
    }

    pub fn codec_shape_check(&self, codec: &LatentCodec) -> Result<(), ModelError> {
        codec.latent_shape(self.config.frames, self.config.height, self.config.width)?;
        if codec.factor() != self.config.codec_factor {
            return Err(ModelError::Config(format!(
                "codec factor {} differs from model factor {}",
                codec.factor(),
                self.config.codec_factor
            )));
        }
        Ok(())
    }
}

fn unstack_one(t: &Tensor<f32>) -> Array4<f32> {
    let s = &t.shape;
    Array4::from_shape_vec((s[1], s[2], s[3], s[4]), t.data.clone()).expect("consistent shape")
}
