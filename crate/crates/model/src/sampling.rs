//! Euler integration of the learned velocity field from noise (t = 1) to
//! data (t = 0), with optional control guidance and classifier-free or
//! norm-capped guidance.

use ndarray::Array4;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use c2r_core::codec::{CodecError, LatentCodec, LatentVideo};
use c2r_core::seeded_rng;
use c2r_core::synthdata::{Domain, SynthError, VideoClip};

use crate::autodiff::Tensor;
use crate::control::GuidanceLatent;
use crate::model::{C2rModel, ModelError};
use crate::text::{TextBatch, NULL};

const NOISE_STREAM: u64 = 0x4e4f_4953;
/// Samples evaluated per forward pass.
pub const SAMPLE_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("sampler config: {0}")]
    Config(String),
    #[error("latent became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Clip(#[from] SynthError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    Apg,
}

impl GuidanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::Apg => "apg",
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(GuidanceMode::None),
            "cfg" => Ok(GuidanceMode::Cfg),
            "apg" => Ok(GuidanceMode::Apg),
            other => Err(format!("unknown guidance mode {other:?} (expected none, cfg or apg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: GuidanceMode,
    pub w: f64,
    /// Norm cap of the apg mode, relative to the conditional velocity.
    pub apg_cap: f64,
    /// Overrides the checkpoint's control scale.
    pub control_scale: Option<f32>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            guidance: GuidanceMode::None,
            w: 1.0,
            apg_cap: 1.5,
            control_scale: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.steps == 0 {
            return Err(SampleError::Config("steps must be at least 1".into()));
        }
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(SampleError::Config("w must be non-negative".into()));
        }
        if !(self.apg_cap.is_finite() && self.apg_cap > 0.0) {
            return Err(SampleError::Config("apg_cap must be positive".into()));
        }
        Ok(())
    }

    /// Uniform schedule from 1 down to 0, `steps + 1` points.
    pub fn schedule(&self) -> Vec<f64> {
        let k = self.steps;
        (0..=k).map(|i| 1.0 - i as f64 / k as f64).collect()
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Combines conditional and unconditional velocities of one sample.
pub fn guided_velocity(v_cond: &[f32], v_uncond: &[f32], config: &SamplerConfig) -> Vec<f32> {
    assert_eq!(v_cond.len(), v_uncond.len(), "velocity size mismatch");
    let w = config.w as f32;
    let cfg = |s: f32| -> Vec<f32> {
        v_cond
            .iter()
            .zip(v_uncond)
            .map(|(&c, &u)| u + s * w * (c - u))
            .collect()
    };
    match config.guidance {
        GuidanceMode::None => v_cond.to_vec(),
        GuidanceMode::Cfg => cfg(1.0),
        GuidanceMode::Apg => {
            let cap = config.apg_cap * norm(v_cond);
            let out = cfg(1.0);
            if norm(&out) <= cap {
                return out;
            }
            // largest s in [0, 1] with |u + s d| <= cap, d = w (c - u)
            let d: Vec<f64> = v_cond
                .iter()
                .zip(v_uncond)
                .map(|(&c, &u)| config.w * (c as f64 - u as f64))
                .collect();
            let u: Vec<f64> = v_uncond.iter().map(|&x| x as f64).collect();
            let a: f64 = d.iter().map(|x| x * x).sum();
            let b: f64 = 2.0 * d.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>();
            let c: f64 = u.iter().map(|x| x * x).sum::<f64>() - cap * cap;
            let disc = b * b - 4.0 * a * c;
            if c <= 0.0 && a > 0.0 && disc >= 0.0 {
                let s = ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, 1.0);
                let out: Vec<f32> = u.iter().zip(&d).map(|(u, d)| (u + s * d) as f32).collect();
                if norm(&out) <= cap * (1.0 + 1e-6) {
                    return out;
                }
            }
            // the unconditional velocity alone exceeds the cap: shrink radially
            let scale = if norm(&out) > 0.0 { cap / norm(&out) } else { 0.0 };
            out.iter().map(|&x| (x as f64 * scale) as f32).collect()
        }
    }
}

/// Velocity field queried by the integrator.
pub trait VelocityField {
    /// `z` holds one latent per request; `t` is shared.
    fn velocity(&self, z: &[Array4<f32>], t: f64, step: usize) -> Result<Vec<Array4<f32>>, SampleError>;
}

/// Integrates `z` from t = 1 to t = 0 with `steps` uniform Euler updates.
/// With a uniform step the state after `k` updates is `z_1 - sum(v) / steps`,
/// so the running velocity sum is kept in 64-bit arithmetic. A constant field
/// then gives the same bits for every step count.
pub fn euler_integrate<F: VelocityField + ?Sized>(
    field: &F,
    z: Vec<Array4<f32>>,
    steps: usize,
) -> Result<Vec<Array4<f32>>, SampleError> {
    let config = SamplerConfig {
        steps,
        ..SamplerConfig::default()
    };
    config.validate()?;
    let sched = config.schedule();
    let start: Vec<Array4<f64>> = z.iter().map(|a| a.mapv(f64::from)).collect();
    let mut sums: Vec<Array4<f64>> = start.iter().map(|a| Array4::zeros(a.raw_dim())).collect();
    let k_total = steps as f64;
    let mut z = z;
    for k in 0..steps {
        let v = field.velocity(&z, sched[k], k)?;
        for (((sum, s0), zi), vi) in sums.iter_mut().zip(&start).zip(z.iter_mut()).zip(&v) {
            sum.zip_mut_with(vi, |a, &b| *a += b as f64);
            let next = ndarray::Zip::from(s0).and(&*sum).map_collect(|&a, &b| a - b / k_total);
            if next.iter().any(|x| !x.is_finite()) {
                return Err(SampleError::NonFinite { step: k + 1 });
            }
            *zi = next.mapv(|x| x as f32);
        }
    }
    Ok(z)
}

/// One sample to draw.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub caption: String,
    /// Control clip frames, or `None` for unconditional-structure sampling.
    pub control: Option<Array4<f32>>,
    pub seed: u64,
}

/// Per-step record of the block inputs of a sampling run.
#[derive(Debug, Clone, Default)]
pub struct SampleTrace {
    /// `(step, latents before the step, block inputs of the conditional pass)`
    pub steps: Vec<(usize, Vec<Array4<f32>>, Vec<Tensor<f32>>)>,
}

struct ModelField<'a> {
    model: &'a C2rModel,
    text: TextBatch,
    null: TextBatch,
    guidance: Option<Vec<GuidanceLatent>>,
    config: &'a SamplerConfig,
    trace: Option<std::cell::RefCell<&'a mut SampleTrace>>,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &[Array4<f32>], t: f64, step: usize) -> Result<Vec<Array4<f32>>, SampleError> {
        let b = z.len();
        let zr: Vec<&Array4<f32>> = z.iter().collect();
        let ts = vec![t; b];
        let guidance: Option<Vec<&GuidanceLatent>> = self.guidance.as_ref().map(|g| g.iter().collect());
        let (v_cond, inputs) = self.model.predict_velocity(&zr, &ts, &self.text, guidance.as_deref())?;
        if let Some(trace) = &self.trace {
            trace.borrow_mut().steps.push((step, z.to_vec(), inputs));
        }
        if self.config.guidance == GuidanceMode::None {
            return Ok(v_cond);
        }
        let (v_uncond, _) = self.model.predict_velocity(&zr, &ts, &self.null, guidance.as_deref())?;
        Ok(v_cond
            .iter()
            .zip(&v_uncond)
            .map(|(c, u)| {
                let out = guided_velocity(
                    c.as_slice().expect("standard layout"),
                    u.as_slice().expect("standard layout"),
                    self.config,
                );
                Array4::from_shape_vec(c.raw_dim(), out).expect("same shape")
            })
            .collect())
    }
}

/// Seeded standard-normal starting latent.
pub fn initial_noise(model: &C2rModel, seed: u64) -> Array4<f32> {
    let lat = model.latent();
    let mut rng = seeded_rng(seed, NOISE_STREAM);
    Array4::from_shape_simple_fn(
        (lat.frames, lat.height, lat.width, lat.channels),
        || StandardNormal.sample(&mut rng),
    )
}

/// Guidance latent of a control clip under the model's adapter.
pub fn control_guidance(model: &C2rModel, frames: &Array4<f32>, scale: Option<f32>) -> Result<GuidanceLatent, SampleError> {
    let features = model.control_features(frames)?;
    let mut g = model.adapt(&features);
    if let Some(s) = scale {
        g.scale = s;
    }
    Ok(g)
}

/// Draws one clip per request. Requests are processed in chunks of
/// [`SAMPLE_CHUNK`]; within a chunk either all or none carry a control.
pub fn sample_latents(
    model: &C2rModel,
    requests: &[SampleRequest],
    config: &SamplerConfig,
    mut trace: Option<&mut SampleTrace>,
) -> Result<Vec<Array4<f32>>, SampleError> {
    config.validate()?;
    let mut out = Vec::with_capacity(requests.len());
    let mut start = 0;
    while start < requests.len() {
        let has_control = requests[start].control.is_some();
        let mut end = start + 1;
        while end < requests.len() && end - start < SAMPLE_CHUNK && requests[end].control.is_some() == has_control {
            end += 1;
        }
        let chunk = &requests[start..end];
        let captions: Vec<&str> = chunk.iter().map(|r| r.caption.as_str()).collect();
        let guidance = if has_control {
            Some(
                chunk
                    .iter()
                    .map(|r| control_guidance(model, r.control.as_ref().expect("chunk has controls"), config.control_scale))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        let field = ModelField {
            model,
            text: model.tokenize(&captions),
            null: TextBatch::new(&vec![vec![NULL]; chunk.len()], model.config.dit.text_len),
            guidance,
            config,
            trace: trace.as_mut().map(|t| std::cell::RefCell::new(&mut **t)),
        };
        let z: Vec<Array4<f32>> = chunk.iter().map(|r| initial_noise(model, r.seed)).collect();
        out.extend(euler_integrate(&field, z, config.steps)?);
        start = end;
    }
    Ok(out)
}

/// Samples and decodes; clips are tagged with the generated domain.
pub fn sample_clips(
    model: &C2rModel,
    codec: &LatentCodec,
    requests: &[SampleRequest],
    config: &SamplerConfig,
) -> Result<Vec<VideoClip>, SampleError> {
    let latents = sample_latents(model, requests, config, None)?;
    latents
        .into_iter()
        .zip(requests)
        .map(|(z, r)| {
            let frames = codec.decode(&LatentVideo {
                values: z,
                factor: codec.factor(),
            })?;
            Ok(VideoClip::new(frames, r.caption.clone(), Domain::Generated)?)
        })
        .collect()
}

/// Single-clip convenience wrapper.
pub fn euler_sample(
    model: &C2rModel,
    codec: &LatentCodec,
    caption: &str,
    control: Option<&Array4<f32>>,
    config: &SamplerConfig,
) -> Result<VideoClip, SampleError> {
    let req = SampleRequest {
        caption: caption.to_string(),
        control: control.cloned(),
        seed: config.seed,
    };
    Ok(sample_clips(model, codec, &[req], config)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(guidance: GuidanceMode, w: f64, cap: f64) -> SamplerConfig {
        SamplerConfig {
            guidance,
            w,
            apg_cap: cap,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn cfg_endpoints() {
        let c = [0.3f32, -1.2, 2.0];
        let u = [1.0f32, 0.5, -0.25];
        assert_eq!(guided_velocity(&c, &u, &cfg(GuidanceMode::Cfg, 1.0, 1.5)), c.to_vec());
        assert_eq!(guided_velocity(&c, &u, &cfg(GuidanceMode::Cfg, 0.0, 1.5)), u.to_vec());
        assert_eq!(guided_velocity(&c, &u, &cfg(GuidanceMode::None, 7.0, 1.5)), c.to_vec());
    }

    #[test]
    fn schedule_is_uniform_and_decreasing() {
        let s = SamplerConfig {
            steps: 4,
            ..SamplerConfig::default()
        }
        .schedule();
        assert_eq!(s, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }
}
