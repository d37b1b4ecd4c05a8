//! Stage I (backbone on real clips) and Stage II (control pathway on the
//! mixed real/synthetic corpus) training loops.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;
use thiserror::Error;

use c2r_core::codec::{LatentCodec, CALIBRATION_CLIPS};
use c2r_core::hsv::{hsv_decorrelate_frames, HsvParams};
use c2r_core::seeded_rng;
use c2r_core::synthdata::{ClipPair, Domain, VideoClip};

use crate::autodiff::{Adam, Graph};
use crate::backbone::{make_noising_sample, stack, NoisingSample};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{MixtureConfig, StageConfig};
use crate::control::feature_batch;
use crate::data::Datasets;
use crate::model::{C2rModel, Control, ModelError};
use crate::text::{TextBatch, NULL};

const BATCH_STREAM: u64 = 0x4241_5443;
const CODEC_STREAM: u64 = 0x434f_4443;
/// Window for the smoothed-loss metrics.
pub const SMOOTHING_WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} pool is empty but has nonzero sampling probability")]
    EmptyPool(&'static str),
    #[error("loss became non-finite ({loss}) at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("stage {0} training needs {1}")]
    Missing(u8, &'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("codec: {0}")]
    Codec(#[from] c2r_core::codec::CodecError),
    #[error("clip: {0}")]
    Synth(#[from] c2r_core::synthdata::SynthError),
}

/// How the control branch of real items is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlSource {
    /// Stage I: no control.
    None,
    /// The target itself.
    Identity,
    /// The target after one random HSV transform.
    Hsv,
}

#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub target: &'a VideoClip,
    pub control: Option<Cow<'a, Array4Frames>>,
    pub caption: &'a str,
    pub domain: Domain,
}

type Array4Frames = ndarray::Array4<f32>;

/// Draws `size` items independently: real with probability `p_real`,
/// otherwise a synthetic pair (coarse control, fine target).
pub fn sample_batch<'a, R: Rng + ?Sized>(
    mixture: MixtureConfig,
    real: &'a [VideoClip],
    pairs: &'a [ClipPair],
    size: usize,
    control: ControlSource,
    hsv_synthetic: bool,
    rng: &mut R,
) -> Result<Vec<BatchItem<'a>>, TrainError> {
    if mixture.p_real > 0.0 && real.is_empty() {
        return Err(TrainError::EmptyPool("real"));
    }
    if mixture.p_real < 1.0 && pairs.is_empty() {
        return Err(TrainError::EmptyPool("synthetic"));
    }
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let is_real = rng.random_bool(mixture.p_real);
        let item = if is_real {
            let clip = &real[rng.random_range(0..real.len())];
            let ctrl = match control {
                ControlSource::None => None,
                ControlSource::Identity => Some(Cow::Borrowed(clip.frames())),
                ControlSource::Hsv => Some(Cow::Owned(hsv_decorrelate_frames(clip.frames(), &HsvParams::sample(rng)))),
            };
            BatchItem {
                target: clip,
                control: ctrl,
                caption: &clip.caption,
                domain: Domain::Real,
            }
        } else {
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let ctrl = match control {
                ControlSource::None => None,
                ControlSource::Hsv if hsv_synthetic => Some(Cow::Owned(hsv_decorrelate_frames(
                    pair.coarse.frames(),
                    &HsvParams::sample(rng),
                ))),
                _ => Some(Cow::Borrowed(pair.coarse.frames())),
            };
            BatchItem {
                target: &pair.fine,
                control: ctrl,
                caption: &pair.fine.caption,
                domain: Domain::SyntheticFine,
            }
        };
        out.push(item);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Fraction of real items in this step's batch.
    pub real_fraction: f64,
    pub wall_time: f64,
}

/// Callbacks invoked by the training loop.
pub trait TrainHooks {
    fn on_log(&mut self, _record: &LogRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _ckpt: &mut Checkpoint) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Keeps every record in memory.
#[derive(Debug, Default)]
pub struct Collect {
    pub records: Vec<LogRecord>,
}

impl TrainHooks for Collect {
    fn on_log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Appends to `logs.jsonl` and writes periodic checkpoints under a run
/// directory.
#[derive(Debug)]
pub struct RunDirHooks {
    pub dir: PathBuf,
    log: fs::File,
}

impl RunDirHooks {
    pub fn open(dir: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir.join("checkpoints")).map_err(io)?;
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("logs.jsonl"))
            .map_err(io)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
        })
    }

    pub fn checkpoint_path(&self, stage: u8, step: u64) -> PathBuf {
        self.dir.join("checkpoints").join(format!("stage{stage}_step{step:06}.ckpt"))
    }
}

impl TrainHooks for RunDirHooks {
    fn on_log(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.log, "{line}").map_err(|source| TrainError::Io {
            path: self.dir.join("logs.jsonl"),
            source,
        })
    }

    fn on_checkpoint(&mut self, ckpt: &mut Checkpoint) -> Result<(), TrainError> {
        let path = self.checkpoint_path(ckpt.manifest.stage, ckpt.manifest.step);
        ckpt.save(&path)?;
        Ok(())
    }
}

/// Where a run starts.
pub enum Start {
    Fresh,
    /// Stage II from a Stage I checkpoint.
    FromStage1(Checkpoint),
    /// Continue a checkpoint of the same stage and config.
    Resume(Checkpoint),
}

/// Codec calibrated on the configured corpus family.
pub fn calibrate_codec(config: &StageConfig) -> Result<LatentCodec, TrainError> {
    Ok(LatentCodec::calibrate_on_corpus(
        config.model.codec_factor,
        &config.data.corpus,
        seeded_rng(config.data.seed, CODEC_STREAM).random(),
        CALIBRATION_CLIPS,
    )?)
}

pub fn train_stage1(config: &StageConfig, data: &Datasets, hooks: &mut dyn TrainHooks) -> Result<Checkpoint, TrainError> {
    train(config, data, Start::Fresh, hooks)
}

pub fn train_stage2(
    config: &StageConfig,
    data: &Datasets,
    stage1: Checkpoint,
    hooks: &mut dyn TrainHooks,
) -> Result<Checkpoint, TrainError> {
    train(config, data, Start::FromStage1(stage1), hooks)
}

/// Stage II model initialised from a Stage I checkpoint: backbone and text
/// weights copied, fresh adapter and heads.
pub fn stage2_model(config: &StageConfig, stage1: &Checkpoint) -> Result<C2rModel, TrainError> {
    stage1.expect_stage(1)?;
    let mut model = C2rModel::new(config.model.clone(), config.seed)?;
    model.copy_groups(&stage1.model.params, &["backbone", "text"])?;
    model.train_only(&["adapter", "heads"]);
    Ok(model)
}

pub fn train(config: &StageConfig, data: &Datasets, start: Start, hooks: &mut dyn TrainHooks) -> Result<Checkpoint, TrainError> {
    let stage = config.stage;
    let mut ckpt = match (stage, start) {
        (1, Start::Fresh) => {
            let mut model = C2rModel::new(config.model.clone(), config.seed)?;
            model.train_only(&["backbone", "text"]);
            let codec = calibrate_codec(config)?;
            model.codec_shape_check(&codec)?;
            Checkpoint::new(1, 0, config.clone(), None, model, codec, None)
        }
        (2, Start::FromStage1(s1)) => {
            let model = stage2_model(config, &s1)?;
            let parent = Some(s1.weights_hash());
            Checkpoint::new(2, 0, config.clone(), parent, model, s1.codec, None)
        }
        (_, Start::Fresh) => return Err(TrainError::Missing(2, "a Stage I checkpoint")),
        (_, Start::FromStage1(_)) => return Err(TrainError::Missing(1, "no Stage I checkpoint")),
        (_, Start::Resume(c)) => {
            c.expect_stage(stage)?;
            let current = config.config_hash();
            if c.manifest.config_hash != current {
                return Err(CheckpointError::ConfigHash {
                    checkpoint: c.manifest.config_hash.clone(),
                    current,
                }
                .into());
            }
            let mut c = c;
            c.manifest.config = config.clone();
            c
        }
    };
    if ckpt.optimizer.is_none() {
        let mut opt = Adam::new(config.lr, Some(config.clip_norm));
        opt.beta1 = config.beta1;
        opt.beta2 = config.beta2;
        opt.eps = config.eps;
        ckpt.optimizer = Some(opt);
    }

    let control = match (stage, config.hsv_enabled) {
        (1, _) => ControlSource::None,
        (_, true) => ControlSource::Hsv,
        (_, false) => ControlSource::Identity,
    };
    let mixture = if stage == 1 {
        MixtureConfig { p_real: 1.0 }
    } else {
        config.mixture()
    };
    let t0 = Instant::now();
    let mut losses: Vec<f64> = Vec::new();
    let first = ckpt.manifest.step as usize;
    for step in first..config.steps {
        let mut rng = seeded_rng(config.seed ^ ((stage as u64) << 56), BATCH_STREAM.wrapping_add(step as u64));
        let items = sample_batch(
            mixture,
            &data.real,
            &data.pairs,
            config.batch_size,
            control,
            config.hsv_synthetic,
            &mut rng,
        )?;
        let real = items.iter().filter(|i| i.domain == Domain::Real).count();
        let loss = train_step(&mut ckpt, config, &items, &mut rng)?;
        if !loss.0.is_finite() {
            return Err(TrainError::Diverged { step: step + 1, loss: loss.0 });
        }
        losses.push(loss.0);
        ckpt.manifest.step = step as u64 + 1;
        let done = step + 1 == config.steps;
        if (step + 1) % config.log_every == 0 || step == first || done {
            hooks.on_log(&LogRecord {
                stage,
                step: step + 1,
                loss: loss.0,
                lr: config.lr,
                grad_norm: loss.1,
                real_fraction: real as f64 / items.len() as f64,
                wall_time: t0.elapsed().as_secs_f64(),
            })?;
        }
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && !done {
            hooks.on_checkpoint(&mut ckpt)?;
        }
    }
    if !losses.is_empty() {
        let w = SMOOTHING_WINDOW.min(losses.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let m = &mut ckpt.manifest.metrics;
        m.insert("loss_first_window".into(), mean(&losses[..w]));
        m.insert("loss_last_window".into(), mean(&losses[losses.len() - w..]));
        m.insert("wall_time".into(), t0.elapsed().as_secs_f64());
    }
    hooks.on_checkpoint(&mut ckpt)?;
    Ok(ckpt)
}

/// Text batch with each caption replaced by the null caption with
/// probability `dropout`.
pub fn caption_batch<R: Rng + ?Sized>(model: &C2rModel, captions: &[&str], dropout: f64, rng: &mut R) -> TextBatch {
    let seqs: Vec<Vec<usize>> = captions
        .iter()
        .map(|c| {
            if dropout > 0.0 && rng.random_bool(dropout) {
                vec![NULL]
            } else {
                model.tokenizer.encode(c)
            }
        })
        .collect();
    TextBatch::new(&seqs, model.config.dit.text_len)
}

/// One optimizer step; returns the batch loss and pre-clip gradient norm.
fn train_step<R: Rng + ?Sized>(
    ckpt: &mut Checkpoint,
    config: &StageConfig,
    items: &[BatchItem<'_>],
    rng: &mut R,
) -> Result<(f64, f64), TrainError> {
    let model = &ckpt.model;
    let samples: Vec<NoisingSample> = items
        .iter()
        .map(|it| {
            let z0 = ckpt.codec.encode_frames(it.target.frames())?.values;
            Ok(make_noising_sample(&z0, rng, None))
        })
        .collect::<Result<_, TrainError>>()?;
    let captions: Vec<&str> = items.iter().map(|i| i.caption).collect();
    let dropout = if config.stage == 1 { config.caption_dropout } else { 0.0 };
    let text = caption_batch(model, &captions, dropout, rng);
    let features = items
        .iter()
        .filter_map(|i| i.control.as_ref())
        .map(|c| model.control_features(c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut g = Graph::new();
    let z: Vec<&Array4Frames> = samples.iter().map(|s| &s.z_t).collect();
    let z = g.constant(stack(&z));
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let ctrl = if features.len() == items.len() && !items.is_empty() {
        let refs: Vec<&Array4Frames> = features.iter().collect();
        Control::Features(g.constant(feature_batch(&refs)))
    } else {
        Control::None
    };
    let out = model.velocity(&mut g, &model.params, z, &t, &text, ctrl);
    let target: Vec<f32> = samples.iter().flat_map(|s| s.target().into_iter()).collect();
    let loss = g.mse(out.velocity, Rc::new(target));
    let value = g.value(loss).data[0] as f64;
    if !value.is_finite() {
        return Ok((value, f64::NAN));
    }
    let grads = g.backward(loss).params();
    let opt = ckpt.optimizer.as_mut().expect("optimizer initialised");
    let norm = opt.update(&mut ckpt.model.params, &grads);
    Ok((value, norm))
}
