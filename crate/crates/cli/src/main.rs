//! `c2r`: data generation, two-stage training, sampling, evaluation and
//! ablations for the toy controllable video generator.

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

use c2r_core::synthdata::{read_clip, write_clip, CorpusConfig};
use c2r_model::checkpoint::{Checkpoint, CheckpointError};
use c2r_model::config::{load_config, ConfigError, StageConfig};
use c2r_model::data::{DataError, Datasets, DATA_ROOT_ENV};
use c2r_model::eval::{
    compare_control, controls_from_dir, run_ablation, write_ablation, AblationAxis, AblationSpec, EvalError,
    TrainingSource,
};
use c2r_model::sampling::{euler_sample, GuidanceMode, SampleError, SamplerConfig};
use c2r_model::training::{train, RunDirHooks, Start, TrainError};

#[derive(Debug, Parser)]
#[command(name = "c2r", version, about = "Toy controllable video generation: data, training, sampling, evaluation")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Single-threaded, fixed-order execution (the only mode; recorded in snapshots).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the real-style corpus and synthetic coarse/fine pairs.
    GenData(GenDataArgs),
    /// Train Stage I (backbone) or Stage II (control pathway).
    Train(TrainArgs),
    /// Sample one clip from a checkpoint.
    Sample(SampleArgs),
    /// Score controlled against uncontrolled sampling on a control set.
    Eval(EvalArgs),
    /// Train and evaluate one Stage II model per axis value.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    /// Output directory; defaults to $C2R_DATA_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    real: usize,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frame size as HxW.
    #[arg(long, default_value = "32x32", value_parser = parse_resolution)]
    resolution: (usize, usize),
    #[arg(long, default_value_t = 8)]
    frames: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint of the same stage and config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Control clip directory, or "none".
    #[arg(long)]
    control: String,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value = "none")]
    guidance: GuidanceMode,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of control clips, or a gen-data directory.
    #[arg(long)]
    controls: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    axis: AblationAxis,
    /// Stage II base config; `init_checkpoint` names the Stage I checkpoint.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 32)]
    steps: usize,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(ConfigError::Invalid { .. }) => 2,
            _ => 1,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let out = args
        .out
        .clone()
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("gen-data needs --out or ${DATA_ROOT_ENV}")))?;
    let (h, w) = args.resolution;
    let corpus = CorpusConfig::default().with_resolution(h, w, args.frames);
    log::info!("generating {} real clips and {} pairs at {h}x{w}x{}", args.real, args.pairs, args.frames);
    let data = Datasets::generate(args.real, args.pairs, args.seed, &corpus)?;
    data.write(&out, args.seed)?;
    write_json(&out.join("config.json"), args)?;
    println!("{}", out.display());
    Ok(())
}

/// Loads the corpus a config points at and aligns the config's corpus
/// settings with it.
fn load_data(config: &mut StageConfig) -> Result<Datasets, CliError> {
    let data = Datasets::resolve(&config.data)?;
    if config.data.resolved_root().is_some() {
        config.data.corpus = data.corpus.clone();
        config.validate()?;
    }
    Ok(data)
}

fn train_cmd(args: &TrainArgs, deterministic: bool) -> Result<(), CliError> {
    let mut config = load_config(&args.config)?;
    config.stage = args.stage;
    let data = load_data(&mut config)?;
    let run = config.run_dir.clone();
    write_json(&run.join("config.json"), &Snapshot {
        deterministic,
        config: &config,
    })?;
    for sub in ["checkpoints", "samples", "reports"] {
        fs::create_dir_all(run.join(sub)).map_err(|source| CliError::Io {
            path: run.join(sub),
            source,
        })?;
    }
    let start = match (&args.resume, args.stage) {
        (Some(p), _) => Start::Resume(Checkpoint::load(p)?),
        (None, 1) => Start::Fresh,
        (None, _) => {
            let p = config
                .init_checkpoint
                .clone()
                .ok_or_else(|| CliError::Usage("stage 2 needs `init_checkpoint` in the config".into()))?;
            Start::FromStage1(Checkpoint::load(&p)?)
        }
    };
    let mut hooks = RunDirHooks::open(&run)?;
    let mut ckpt = train(&config, &data, start, &mut hooks)?;
    let final_path = run.join("checkpoints").join(format!("stage{}_final.ckpt", config.stage));
    ckpt.save(&final_path)?;
    log::info!("metrics {:?}", ckpt.manifest.metrics);
    println!("{}", final_path.display());
    Ok(())
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    deterministic: bool,
    #[serde(flatten)]
    config: &'a T,
}

fn sample_cmd(args: &SampleArgs, deterministic: bool) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let control = match args.control.as_str() {
        "none" => None,
        dir => Some(read_clip(Path::new(dir)).map_err(DataError::from)?),
    };
    let config = SamplerConfig {
        steps: args.steps,
        guidance: args.guidance,
        w: args.w,
        seed: args.seed,
        ..SamplerConfig::default()
    };
    config.validate()?;
    let clip = euler_sample(&ckpt.model, &ckpt.codec, &args.prompt, control.as_ref().map(|c| c.frames()), &config)?;
    write_clip(&clip, &args.out).map_err(DataError::from)?;
    write_json(&args.out.join("config.json"), &serde_json::json!({
        "deterministic": deterministic,
        "ckpt": args.ckpt,
        "control": args.control,
        "prompt": args.prompt,
        "sampler": config,
    }))?;
    println!("{}", args.out.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let controls = controls_from_dir(&args.controls)?;
    let sampler = SamplerConfig {
        steps: args.steps,
        seed: args.seed,
        ..SamplerConfig::default()
    };
    let cmp = compare_control(&ckpt, &controls, &sampler)?;
    write_json(&args.out, &cmp)?;
    println!(
        "structure controlled {:.4} baseline {:.4} gain {:+.4}",
        cmp.controlled.structure.mean, cmp.baseline.structure.mean, cmp.structure_gain
    );
    Ok(())
}

fn ablate_cmd(args: &AblateArgs, deterministic: bool) -> Result<(), CliError> {
    let mut base = load_config(&args.config)?;
    base.stage = 2;
    let stage1 = base
        .init_checkpoint
        .clone()
        .ok_or_else(|| CliError::Runtime("missing prerequisite checkpoint: set `init_checkpoint` to a Stage I checkpoint".into()))?;
    if !stage1.exists() {
        return Err(CliError::Runtime(format!("missing prerequisite checkpoint {}", stage1.display())));
    }
    let data = load_data(&mut base)?;
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };
    write_json(&args.out.join("config.json"), &serde_json::json!({
        "deterministic": deterministic,
        "axis": args.axis,
        "seeds": seeds,
        "base": base,
    }))?;
    let ckpt_dir = args.out.join("checkpoints");
    let mut source = TrainingSource::new(&data, base.clone());
    source.stage1_path = Some(stage1);
    source.cache_dir = Some(ckpt_dir.clone());
    let out = args.out.clone();
    source.hooks = Box::new(move |_| match RunDirHooks::open(&out) {
        Ok(h) => Box::new(h),
        Err(e) => {
            log::warn!("cannot open run log: {e}");
            Box::new(c2r_model::training::Collect::default())
        }
    });
    let spec = AblationSpec {
        axis: args.axis,
        base,
        seeds,
        sampler: SamplerConfig {
            steps: args.steps,
            ..SamplerConfig::default()
        },
        values: None,
    };
    let table = run_ablation(&spec, &mut source)?;
    let files = write_ablation(&table, &args.out.join("reports"))?;
    for s in &table.summary {
        println!(
            "{}={} structure {:.4} adherence {:.4} leakage {:.4} params {}",
            table.axis, s.value, s.structure, s.adherence, s.leakage, s.control_params
        );
    }
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a, cli.deterministic),
        Command::Sample(a) => sample_cmd(a, cli.deterministic),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a, cli.deterministic),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
