//! Evaluation on held-out controls and the ablation runner.

use ndarray::Array4;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

use c2r_core::codec::LatentCodec;
use c2r_core::metrics::{
    adherence_score, leakage_score, spearman, structure_score, Aggregate, ClipScores, MetricReport, RunMetadata,
};
use c2r_core::synthdata::{parse_caption, read_clip, CaptionError, Coarseness, SpriteTrack, VideoClip, COLOR_NAMES};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::StageConfig;
use crate::control::HeadMode;
use crate::data::{heldout_pairs, heldout_real, DataError, Datasets};
use crate::model::C2rModel;
use crate::sampling::{sample_clips, SampleError, SampleRequest, SamplerConfig};
use crate::training::{train, Start, TrainError, TrainHooks};

/// Noted in every report.
pub const STRUCTURE_CAVEAT: &str =
    "structure proxy does not penalise large appearance changes; read it together with leakage";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error("control {0} carries no ground-truth trajectories")]
    NoTracks(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report output: {0}")]
    Output(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One evaluation control with its prompt and ground truth.
#[derive(Debug, Clone)]
pub struct EvalControl {
    pub id: String,
    pub frames: Array4<f32>,
    pub prompt: String,
    pub tracks: Vec<SpriteTrack>,
}

impl EvalControl {
    pub fn from_clip(id: impl Into<String>, clip: &VideoClip, prompt: Option<String>) -> Result<Self, EvalError> {
        let id = id.into();
        let tracks = clip.trajectories.clone().ok_or_else(|| EvalError::NoTracks(id.clone()))?;
        Ok(Self {
            prompt: prompt.unwrap_or_else(|| clip.caption.clone()),
            frames: clip.frames().clone(),
            tracks,
            id,
        })
    }
}

/// Caption with every sprite colour moved to the opposite side of the
/// colour wheel.
pub fn conflicting_caption(caption: &str) -> Result<String, CaptionError> {
    let mut attrs = parse_caption(caption)?;
    let n = COLOR_NAMES.len();
    for s in &mut attrs.sprites {
        let i = COLOR_NAMES.iter().position(|&c| c == s.color).unwrap_or(0);
        s.color = COLOR_NAMES[(i + n / 2) % n].to_string();
    }
    Ok(attrs.to_caption())
}

/// Coarse controls of the held-out synthetic pairs; `coarseness` forces a tier.
pub fn heldout_controls(config: &StageConfig, coarseness: Option<Coarseness>) -> Result<Vec<EvalControl>, EvalError> {
    heldout_pairs(config.data.heldout, config.data.seed, &config.data.corpus, coarseness)?
        .iter()
        .enumerate()
        .map(|(i, p)| EvalControl::from_clip(format!("heldout_{i:03}"), &p.coarse, Some(p.fine.caption.clone())))
        .collect()
}

/// Held-out real-style clips used as controls, prompted with a colour that
/// conflicts with the clip.
pub fn conflicting_real_controls(config: &StageConfig) -> Result<Vec<EvalControl>, EvalError> {
    heldout_real(config.data.heldout, config.data.seed, &config.data.corpus)?
        .iter()
        .enumerate()
        .map(|(i, c)| EvalControl::from_clip(format!("real_{i:03}"), c, Some(conflicting_caption(&c.caption)?)))
        .collect()
}

/// Reads controls from a directory of clips, or from the coarse clips of a
/// `gen-data` directory.
pub fn controls_from_dir(dir: &Path) -> Result<Vec<EvalControl>, EvalError> {
    let pairs = dir.join("pairs");
    let (root, sub) = if pairs.is_dir() { (pairs, Some("coarse")) } else { (dir.to_path_buf(), None) };
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(io_err(&root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        let clip_dir = match sub {
            Some(s) => d.join(s),
            None => d.clone(),
        };
        let clip = read_clip(&clip_dir).map_err(DataError::from)?;
        let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        // pairs carry the caption of their fine target
        let prompt = match sub {
            Some(_) => Some(read_clip(&d.join("fine")).map_err(DataError::from)?.caption),
            None => None,
        };
        out.push(EvalControl::from_clip(id, &clip, prompt)?);
    }
    if out.is_empty() {
        return Err(EvalError::Missing(format!("no control clips under {}", dir.display())));
    }
    Ok(out)
}

pub fn score_clip(id: &str, output: &Array4<f32>, control: &EvalControl) -> Result<ClipScores, EvalError> {
    let s = structure_score(output, &control.tracks);
    let a = adherence_score(output, &control.prompt)?;
    let l = leakage_score(&control.frames, output);
    Ok(ClipScores {
        clip_id: id.to_string(),
        structure: s.score,
        adherence: a.score,
        leakage: l.score,
        undetected: s.undetected,
        leakage_degenerate: l.degenerate,
    })
}

/// Samples one clip per control (with or without the control signal) and
/// scores it. Sample `i` uses seed `sampler.seed + i`.
pub fn evaluate(
    model: &C2rModel,
    codec: &LatentCodec,
    controls: &[EvalControl],
    sampler: &SamplerConfig,
    use_control: bool,
    metadata: RunMetadata,
) -> Result<MetricReport, EvalError> {
    let requests: Vec<SampleRequest> = controls
        .iter()
        .enumerate()
        .map(|(i, c)| SampleRequest {
            caption: c.prompt.clone(),
            control: use_control.then(|| c.frames.clone()),
            seed: sampler.seed.wrapping_add(i as u64),
        })
        .collect();
    let clips = sample_clips(model, codec, &requests, sampler)?;
    let rows = clips
        .iter()
        .zip(controls)
        .map(|(clip, c)| score_clip(&c.id, clip.frames(), c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::from_rows(rows, metadata))
}

pub fn metadata_for(ckpt: &Checkpoint, label: &str, seeds: Vec<u64>) -> RunMetadata {
    let c = &ckpt.manifest.config;
    RunMetadata {
        checkpoint_hash: Some(ckpt.weights_hash()),
        p_real: (ckpt.manifest.stage == 2).then_some(c.p_real),
        policy: Some(c.model.policy.to_string()),
        seeds,
        label: label.to_string(),
        caveats: vec![STRUCTURE_CAVEAT.to_string()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlComparison {
    pub controlled: MetricReport,
    pub baseline: MetricReport,
    /// Controlled minus baseline mean structure score.
    pub structure_gain: f64,
}

/// Controlled sampling against uncontrolled sampling with the same prompts
/// and seeds.
pub fn compare_control(
    ckpt: &Checkpoint,
    controls: &[EvalControl],
    sampler: &SamplerConfig,
) -> Result<ControlComparison, EvalError> {
    let seeds = vec![sampler.seed];
    let controlled = evaluate(
        &ckpt.model,
        &ckpt.codec,
        controls,
        sampler,
        true,
        metadata_for(ckpt, "controlled", seeds.clone()),
    )?;
    let baseline = evaluate(
        &ckpt.model,
        &ckpt.codec,
        controls,
        sampler,
        false,
        metadata_for(ckpt, "baseline", seeds),
    )?;
    Ok(ControlComparison {
        structure_gain: controlled.structure.mean - baseline.structure.mean,
        controlled,
        baseline,
    })
}

/// Trains or loads the checkpoints an ablation needs.
pub trait CheckpointSource {
    fn stage1(&mut self, seed: u64) -> Result<Checkpoint, EvalError>;
    fn stage2(&mut self, config: &StageConfig) -> Result<Checkpoint, EvalError>;
}

/// Trains on demand, reusing checkpoints found in `cache_dir`.
pub struct TrainingSource<'a> {
    pub data: &'a Datasets,
    /// Stage I config; its seed is replaced per request.
    pub stage1_config: StageConfig,
    /// Pinned Stage I checkpoint used for every seed instead of training.
    pub stage1_path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub hooks: Box<dyn FnMut(&StageConfig) -> Box<dyn TrainHooks> + 'a>,
}

impl<'a> TrainingSource<'a> {
    pub fn new(data: &'a Datasets, stage1_config: StageConfig) -> Self {
        Self {
            data,
            stage1_config,
            stage1_path: None,
            cache_dir: None,
            hooks: Box::new(|_| Box::new(crate::training::Collect::default())),
        }
    }

    fn cached(&mut self, config: &StageConfig, start: Start, parent: &str) -> Result<Checkpoint, EvalError> {
        let path = self.cache_dir.as_ref().map(|d| {
            d.join(format!(
                "stage{}_{}_{}_{}.ckpt",
                config.stage,
                &config.config_hash()[..16],
                config.steps,
                &parent[..parent.len().min(12)]
            ))
        });
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            if let Ok(c) = Checkpoint::load(p) {
                if c.manifest.step as usize == config.steps && c.manifest.config_hash == config.config_hash() {
                    return Ok(c);
                }
            }
        }
        let mut hooks = (self.hooks)(config);
        let mut ckpt = train(config, self.data, start, hooks.as_mut())?;
        if let Some(p) = path {
            ckpt.save(&p)?;
        }
        Ok(ckpt)
    }
}

impl CheckpointSource for TrainingSource<'_> {
    fn stage1(&mut self, seed: u64) -> Result<Checkpoint, EvalError> {
        if let Some(p) = &self.stage1_path {
            let c = Checkpoint::load(p)?;
            c.expect_stage(1)?;
            return Ok(c);
        }
        let config = StageConfig {
            stage: 1,
            seed,
            ..self.stage1_config.clone()
        };
        self.cached(&config, Start::Fresh, "root")
    }

    fn stage2(&mut self, config: &StageConfig) -> Result<Checkpoint, EvalError> {
        let s1 = self.stage1(config.seed)?;
        let parent = s1.weights_hash();
        self.cached(config, Start::FromStage1(s1), &parent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Mixture,
    Heads,
    Hsv,
    Coarseness,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Mixture => "mixture",
            AblationAxis::Heads => "heads",
            AblationAxis::Hsv => "hsv",
            AblationAxis::Coarseness => "coarseness",
        }
    }

    /// Default axis values and their numeric positions.
    pub fn default_values(self) -> Vec<(String, f64)> {
        match self {
            AblationAxis::Mixture => vec![("0.0".into(), 0.0), ("0.5".into(), 0.5), ("1.0".into(), 1.0)],
            AblationAxis::Heads => vec![("zero".into(), 0.0), ("one".into(), 1.0), ("per_block".into(), 2.0)],
            AblationAxis::Hsv => vec![("off".into(), 0.0), ("on".into(), 1.0)],
            AblationAxis::Coarseness => vec![("L0".into(), 0.0), ("L1".into(), 1.0), ("L2".into(), 2.0)],
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mixture" => Ok(AblationAxis::Mixture),
            "heads" => Ok(AblationAxis::Heads),
            "hsv" => Ok(AblationAxis::Hsv),
            "coarseness" => Ok(AblationAxis::Coarseness),
            other => Err(format!("unknown axis {other:?} (expected mixture, heads, hsv or coarseness)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    /// Stage II base config.
    pub base: StageConfig,
    pub seeds: Vec<u64>,
    pub sampler: SamplerConfig,
    /// Overrides the axis defaults.
    pub values: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub x: f64,
    pub seed: u64,
    pub control_params: usize,
    pub structure: Aggregate,
    pub adherence: Aggregate,
    pub leakage: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub value: String,
    pub x: f64,
    pub control_params: usize,
    /// Means over seeds of the per-seed means.
    pub structure: f64,
    pub adherence: f64,
    pub leakage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    /// Spearman correlation of each score against the axis position.
    pub spearman_structure: Option<f64>,
    pub spearman_adherence: Option<f64>,
    pub spearman_leakage: Option<f64>,
    pub reports: Vec<MetricReport>,
    pub caveats: Vec<String>,
}

impl AblationTable {
    pub fn summary_for(&self, value: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.value == value)
    }
}

fn apply_axis(base: &StageConfig, axis: AblationAxis, value: &str, x: f64) -> Result<StageConfig, EvalError> {
    let mut c = base.clone();
    c.stage = 2;
    match axis {
        AblationAxis::Mixture => {
            c.p_real = x;
            c.preset = None;
        }
        AblationAxis::Heads => {
            c.model.policy.heads = value
                .parse::<HeadMode>()
                .map_err(|e| EvalError::Missing(format!("head mode: {e}")))?;
        }
        AblationAxis::Hsv => c.hsv_enabled = x > 0.5,
        AblationAxis::Coarseness => {}
    }
    c.validate().map_err(|e| EvalError::Missing(e.to_string()))?;
    Ok(c)
}

pub fn run_ablation(spec: &AblationSpec, source: &mut dyn CheckpointSource) -> Result<AblationTable, EvalError> {
    let values = spec.values.clone().unwrap_or_else(|| spec.axis.default_values());
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &seed in &spec.seeds {
        for (value, x) in &values {
            let mut config = apply_axis(&spec.base, spec.axis, value, *x)?;
            config.seed = seed;
            let ckpt = source.stage2(&config)?;
            let controls = match spec.axis {
                AblationAxis::Hsv => conflicting_real_controls(&config)?,
                AblationAxis::Coarseness => {
                    let level = Coarseness::parse(value)
                        .ok_or_else(|| EvalError::Missing(format!("coarseness level {value:?}")))?;
                    heldout_controls(&config, Some(level))?
                }
                _ => heldout_controls(&config, None)?,
            };
            let sampler = SamplerConfig {
                seed: spec.sampler.seed.wrapping_add(seed.wrapping_mul(1000)),
                ..spec.sampler.clone()
            };
            let label = format!("{}={value} seed={seed}", spec.axis);
            let report = evaluate(
                &ckpt.model,
                &ckpt.codec,
                &controls,
                &sampler,
                true,
                metadata_for(&ckpt, &label, vec![seed]),
            )?;
            rows.push(AblationRow {
                value: value.clone(),
                x: *x,
                seed,
                control_params: ckpt.model.control_param_count(),
                structure: report.structure,
                adherence: report.adherence,
                leakage: report.leakage,
            });
            reports.push(report);
        }
    }
    let summary: Vec<AblationSummary> = values
        .iter()
        .map(|(value, x)| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| &r.value == value).collect();
            let mean = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len().max(1) as f64;
            AblationSummary {
                value: value.clone(),
                x: *x,
                control_params: rs.first().map_or(0, |r| r.control_params),
                structure: mean(|r| r.structure.mean),
                adherence: mean(|r| r.adherence.mean),
                leakage: mean(|r| r.leakage.mean),
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
    let corr = |f: fn(&AblationRow) -> f64| spearman(&xs, &rows.iter().map(f).collect::<Vec<_>>());
    Ok(AblationTable {
        axis: spec.axis,
        seeds: spec.seeds.clone(),
        spearman_structure: corr(|r| r.structure.mean),
        spearman_adherence: corr(|r| r.adherence.mean),
        spearman_leakage: corr(|r| r.leakage.mean),
        rows,
        summary,
        reports,
        caveats: vec![STRUCTURE_CAVEAT.to_string()],
    })
}

/// Writes `ablation_<axis>.csv`, `.json` and `.svg` into `dir`.
pub fn write_ablation(table: &AblationTable, dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stem = format!("ablation_{}", table.axis);
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| EvalError::Output(e.to_string()))?;
    w.write_record([
        "axis",
        "value",
        "x",
        "seed",
        "control_params",
        "structure_mean",
        "structure_std",
        "adherence_mean",
        "adherence_std",
        "leakage_mean",
        "leakage_std",
        "count",
    ])
    .map_err(|e| EvalError::Output(e.to_string()))?;
    for r in &table.rows {
        w.write_record([
            table.axis.to_string(),
            r.value.clone(),
            r.x.to_string(),
            r.seed.to_string(),
            r.control_params.to_string(),
            r.structure.mean.to_string(),
            r.structure.std.to_string(),
            r.adherence.mean.to_string(),
            r.adherence.std.to_string(),
            r.leakage.mean.to_string(),
            r.leakage.std.to_string(),
            r.structure.count.to_string(),
        ])
        .map_err(|e| EvalError::Output(e.to_string()))?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(table).expect("table serializes");
    fs::write(&json_path, json).map_err(io_err(&json_path))?;

    let svg_path = dir.join(format!("{stem}.svg"));
    plot_ablation(table, &svg_path).map_err(|e| EvalError::Output(e.to_string()))?;
    Ok(vec![csv_path, json_path, svg_path])
}

fn plot_ablation(table: &AblationTable, path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (960, 320)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((1, 3));
    let series: [(&str, fn(&AblationSummary) -> f64, (f64, f64)); 3] = [
        ("structure", |s| s.structure, (0.0, 1.0)),
        ("adherence", |s| s.adherence, (0.0, 1.0)),
        ("leakage", |s| s.leakage, (-1.0, 1.0)),
    ];
    let labels: Vec<String> = table.summary.iter().map(|s| s.value.clone()).collect();
    let n = table.summary.len().max(1);
    for (panel, (name, get, (lo, hi))) in panels.iter().zip(series) {
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{name} vs {}", table.axis), ("sans-serif", 16))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), lo..hi)?;
        chart
            .configure_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .draw()?;
        let pts: Vec<(f64, f64)> = table
            .summary
            .iter()
            .enumerate()
            .map(|(i, s)| (i as f64, get(s)))
            .collect();
        chart.draw_series(LineSeries::new(pts.clone(), &BLUE))?;
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled())))?;
    }
    root.present()?;
    Ok(())
}
