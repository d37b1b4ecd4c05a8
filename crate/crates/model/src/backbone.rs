//! Flow-matching diffusion transformer over patchified video latents.
//!
//! Tokens are `(frame, row, col)` latent patches with full spatio-temporal
//! self-attention. Timestep and pooled text condition every block through
//! zero-initialised adaptive layer norm; text tokens are read by
//! cross-attention in every block.

use ndarray::{Array4, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::autodiff::{Graph, Init, ParamStore, Scalar, Tensor, Var};
use crate::nn::{position_table, timestep_features, Attention, Linear};
use crate::text::EncodedText;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DitConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
    pub text_len: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            blocks: 6,
            width: 128,
            heads: 4,
            patch: 1,
            mlp_ratio: 4,
            text_len: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitBlock {
    /// `silu(cond) -> [shift, scale, gate] x {attention, mlp}`
    pub modulation: Linear,
    pub attn: Attention,
    pub cross: Attention,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dit {
    pub config: DitConfig,
    pub latent: LatentShape,
    pub patch_embed: Linear,
    pub time1: Linear,
    pub time2: Linear,
    pub blocks: Vec<DitBlock>,
    pub final_modulation: Linear,
    pub final_out: Linear,
}

/// Result of a DiT forward pass.
#[derive(Debug, Clone)]
pub struct DitOutput {
    /// `[batch, frames, height, width, channels]`
    pub velocity: Var,
    /// Token activations entering each block, after any injection.
    pub block_inputs: Vec<Var>,
}

impl Dit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        config: DitConfig,
        latent: LatentShape,
        rng: &mut R,
    ) -> Self {
        let d = config.width;
        let p = config.patch;
        assert!(
            latent.height.is_multiple_of(p) && latent.width.is_multiple_of(p),
            "latent {}x{} not divisible by patch {p}",
            latent.height,
            latent.width
        );
        let pdim = p * p * latent.channels;
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("backbone.block{i}");
                DitBlock {
                    modulation: Linear::new(store, &format!("{n}.mod"), d, 6 * d, true, Init::Zeros, rng),
                    attn: Attention::new(store, &format!("{n}.attn"), d, config.heads, rng),
                    cross: Attention::new(store, &format!("{n}.cross"), d, config.heads, rng),
                    fc1: Linear::new(store, &format!("{n}.fc1"), d, config.mlp_ratio * d, true, Init::Xavier, rng),
                    fc2: Linear::new(store, &format!("{n}.fc2"), config.mlp_ratio * d, d, true, Init::Xavier, rng),
                }
            })
            .collect();
        Self {
            patch_embed: Linear::new(store, "backbone.patch", pdim, d, true, Init::Xavier, rng),
            time1: Linear::new(store, "backbone.time1", d, d, true, Init::Xavier, rng),
            time2: Linear::new(store, "backbone.time2", d, d, true, Init::Xavier, rng),
            blocks,
            final_modulation: Linear::new(store, "backbone.final_mod", d, 2 * d, true, Init::Zeros, rng),
            final_out: Linear::new(store, "backbone.final_out", d, pdim, true, Init::Zeros, rng),
            config,
            latent,
        }
    }

    pub fn tokens_per_sample(&self) -> usize {
        let p = self.config.patch;
        self.latent.frames * (self.latent.height / p) * (self.latent.width / p)
    }

    pub fn patch_dim(&self) -> usize {
        self.config.patch * self.config.patch * self.latent.channels
    }

    /// `out[b, s, q]` index into `[b, frames, height, width, channels]`.
    pub fn patchify_index(&self, batch: usize) -> Rc<Vec<usize>> {
        let LatentShape {
            frames,
            height,
            width,
            channels,
        } = self.latent;
        let p = self.config.patch;
        let mut idx = Vec::with_capacity(batch * self.latent.len());
        for b in 0..batch {
            for f in 0..frames {
                for i in 0..height / p {
                    for j in 0..width / p {
                        for dy in 0..p {
                            for dx in 0..p {
                                let base = (((b * frames + f) * height + i * p + dy) * width + j * p + dx) * channels;
                                idx.extend(base..base + channels);
                            }
                        }
                    }
                }
            }
        }
        Rc::new(idx)
    }

    pub fn unpatchify_index(&self, batch: usize) -> Rc<Vec<usize>> {
        let fwd = self.patchify_index(batch);
        let mut inv = vec![0; fwd.len()];
        for (o, &src) in fwd.iter().enumerate() {
            inv[src] = o;
        }
        Rc::new(inv)
    }

    /// Latent `[b, frames, h, w, c]` to tokens `[b, s, p*p*c]`.
    pub fn patchify<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Var {
        let b = g.shape(z)[0];
        g.gather(z, self.patchify_index(b), vec![b, self.tokens_per_sample(), self.patch_dim()])
    }

    /// Runs the transformer. `inject(g, block, x)` may rewrite the input of
    /// each block.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z_t: Var,
        t: &[f64],
        text: EncodedText,
        text_mask: &[bool],
        inject: &mut dyn FnMut(&mut Graph<T>, usize, Var) -> Var,
    ) -> DitOutput {
        let zs = g.shape(z_t).to_vec();
        assert_eq!(&zs[1..], &self.latent.dims(), "latent shape mismatch");
        let b = zs[0];
        assert_eq!(t.len(), b, "one timestep per batch item");
        let d = self.config.width;
        let s = self.tokens_per_sample();
        let p = self.config.patch;

        let tokens = self.patchify(g, z_t);
        let x = self.patch_embed.forward(g, store, tokens);
        let pos = g.constant(position_table(
            self.latent.frames,
            self.latent.height / p,
            self.latent.width / p,
            d,
        ));
        let mut x = g.add_tiled(x, pos);

        let tf = g.constant(timestep_features(t, d));
        let te = self.time1.forward(g, store, tf);
        let te = g.silu(te);
        let te = self.time2.forward(g, store, te);
        let cond = g.add(te, text.pooled);
        let cond = g.silu(cond);

        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            x = inject(g, i, x);
            block_inputs.push(x);
            let m = blk.modulation.forward(g, store, cond);
            let chunk = |g: &mut Graph<T>, k: usize| g.slice_cols(m, k * d, d);
            let (shift1, scale1, gate1) = (chunk(g, 0), chunk(g, 1), chunk(g, 2));
            let (shift2, scale2, gate2) = (chunk(g, 3), chunk(g, 4), chunk(g, 5));

            let h = modulate(g, x, shift1, scale1);
            let a = blk.attn.forward(g, store, h, h, None);
            let a = g.mul_rows(a, gate1);
            x = g.add(x, a);

            let h = g.layer_norm(x);
            let c = blk.cross.forward(g, store, h, text.tokens, Some(text_mask));
            x = g.add(x, c);

            let h = modulate(g, x, shift2, scale2);
            let h = blk.fc1.forward(g, store, h);
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, store, h);
            let h = g.mul_rows(h, gate2);
            x = g.add(x, h);
        }

        let m = self.final_modulation.forward(g, store, cond);
        let shift = g.slice_cols(m, 0, d);
        let scale = g.slice_cols(m, d, d);
        let h = modulate(g, x, shift, scale);
        let out = self.final_out.forward(g, store, h);
        let mut shape = vec![b];
        shape.extend(self.latent.dims());
        let velocity = g.gather(out, self.unpatchify_index(b), shape);
        debug_assert_eq!(g.value(velocity).len(), b * s * self.patch_dim());
        DitOutput {
            velocity,
            block_inputs,
        }
    }
}

/// `LN(x) * (1 + scale) + shift` with per-sample `shift`, `scale` `[b, d]`.
fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x);
    let hs = g.mul_rows(h, scale);
    let h = g.add(h, hs);
    g.add_rows(h, shift)
}

/// One draw of the forward noising process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisingSample {
    pub z0: Array4<f32>,
    pub eps: Array4<f32>,
    pub t: f64,
    pub z_t: Array4<f32>,
}

impl NoisingSample {
    /// Regression target `eps - z0`; independent of `t`.
    pub fn target(&self) -> Array4<f32> {
        &self.eps - &self.z0
    }
}

pub fn interpolate(z0: &Array4<f32>, eps: &Array4<f32>, t: f64) -> Array4<f32> {
    let t = t as f32;
    let mut out = Array4::zeros(z0.raw_dim());
    Zip::from(&mut out)
        .and(z0)
        .and(eps)
        .for_each(|o, &a, &e| *o = (1.0 - t) * a + t * e);
    out
}

/// Draws `eps ~ N(0, I)` and, unless given, `t ~ U[0, 1]`.
pub fn make_noising_sample<R: Rng + ?Sized>(z0: &Array4<f32>, rng: &mut R, t: Option<f64>) -> NoisingSample {
    let eps = Array4::from_shape_simple_fn(z0.raw_dim(), || StandardNormal.sample(rng));
    let t = t.unwrap_or_else(|| rng.random::<f64>());
    NoisingSample {
        z_t: interpolate(z0, &eps, t),
        z0: z0.clone(),
        eps,
        t,
    }
}

/// Mean squared error between a prediction and `eps - z0`, over all
/// elements of the batch.
pub fn fm_loss(predictions: &[Array4<f32>], batch: &[NoisingSample]) -> f64 {
    assert!(!batch.is_empty(), "fm_loss needs a nonempty batch");
    assert_eq!(predictions.len(), batch.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, s) in predictions.iter().zip(batch) {
        let target = s.target();
        assert_eq!(p.shape(), target.shape(), "prediction shape mismatch");
        for (a, b) in p.iter().zip(target.iter()) {
            let d = *a as f64 - *b as f64;
            sum += d * d;
        }
        n += p.len();
    }
    sum / n as f64
}

/// Stacks per-sample arrays into one `[b, ...]` tensor.
pub fn stack<T: Scalar>(items: &[&Array4<f32>]) -> Tensor<T> {
    let mut shape = vec![items.len()];
    shape.extend(items[0].shape());
    let data = items
        .iter()
        .flat_map(|a| a.iter().map(|&v| T::of(v as f64)))
        .collect();
    Tensor::new(shape, data)
}

/// Splits a `[b, n, h, w, c]` tensor back into per-sample arrays.
pub fn unstack(t: &Tensor<f32>) -> Vec<Array4<f32>> {
    let s = &t.shape;
    let per: usize = s[1..].iter().product();
    (0..s[0])
        .map(|b| {
            Array4::from_shape_vec((s[1], s[2], s[3], s[4]), t.data[b * per..(b + 1) * per].to_vec())
                .expect("consistent shape")
        })
        .collect()
}
