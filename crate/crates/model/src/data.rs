//! Training corpora: generated in memory or read from a `gen-data` directory.
//!
//! Directory layout:
//! `corpus.json`, `real/<id>/…` and `pairs/<id>/{fine,coarse}/…`, each clip
//! in the synthdata clip format.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

use c2r_core::synthdata::{
    generate_pair_corpus, generate_real_corpus, item_seed, pair_from_spec, read_clip, synthetic_spec, write_clip,
    ClipIoError, ClipPair, Coarseness, CorpusConfig, SynthError, VideoClip,
};

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "C2R_DATA_ROOT";
pub const CORPUS_FILE: &str = "corpus.json";

const HELDOUT_STREAM: u64 = 0x4845_4c44;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Clip(#[from] ClipIoError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus at {path}: {reason}")]
    Layout { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory written by `gen-data`. When absent the data-root
    /// environment variable is consulted, then the corpus is generated in
    /// memory from the fields below.
    pub root: Option<PathBuf>,
    pub real: usize,
    pub pairs: usize,
    pub seed: u64,
    pub corpus: CorpusConfig,
    /// Size of the held-out control set used for evaluation.
    pub heldout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            real: 2000,
            pairs: 20,
            seed: 0,
            corpus: CorpusConfig::default(),
            heldout: 50,
        }
    }
}

impl DataConfig {
    pub fn resolved_root(&self) -> Option<PathBuf> {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub real: usize,
    pub pairs: usize,
    pub seed: u64,
    pub corpus: CorpusConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub real: Vec<VideoClip>,
    pub pairs: Vec<ClipPair>,
    pub corpus: CorpusConfig,
}

impl Datasets {
    pub fn generate(real: usize, pairs: usize, seed: u64, corpus: &CorpusConfig) -> Result<Self, DataError> {
        let real_clips = generate_real_corpus(seed, real, corpus)?;
        let pair_clips = generate_pair_corpus(seed, pairs, corpus)?;
        Ok(Self {
            real: real_clips,
            pairs: pair_clips,
            corpus: corpus.clone(),
        })
    }

    /// Reads from the configured root, or generates when there is none.
    pub fn resolve(config: &DataConfig) -> Result<Self, DataError> {
        match config.resolved_root() {
            Some(root) => Self::load(&root),
            None => Self::generate(config.real, config.pairs, config.seed, &config.corpus),
        }
    }

    pub fn write(&self, root: &Path, seed: u64) -> Result<(), DataError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let manifest = CorpusManifest {
            real: self.real.len(),
            pairs: self.pairs.len(),
            seed,
            corpus: self.corpus.clone(),
        };
        let path = root.join(CORPUS_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        for (i, clip) in self.real.iter().enumerate() {
            write_clip(clip, &root.join("real").join(format!("real_{i:05}")))?;
        }
        for (i, pair) in self.pairs.iter().enumerate() {
            let dir = root.join("pairs").join(format!("pair_{i:05}"));
            write_clip(&pair.fine, &dir.join("fine"))?;
            write_clip(&pair.coarse, &dir.join("coarse"))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, DataError> {
        let path = root.join(CORPUS_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| DataError::Layout {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        let real = sorted_dirs(&root.join("real"))?
            .iter()
            .map(|d| read_clip(d))
            .collect::<Result<Vec<_>, _>>()?;
        let mut pairs = Vec::new();
        for dir in sorted_dirs(&root.join("pairs"))? {
            let fine = read_clip(&dir.join("fine"))?;
            let coarse = read_clip(&dir.join("coarse"))?;
            let spec = fine.spec.clone().ok_or_else(|| DataError::Layout {
                path: dir.clone(),
                reason: "fine clip carries no scene spec".into(),
            })?;
            let pair = ClipPair { fine, coarse, spec };
            pair.validate()?;
            pairs.push(pair);
        }
        if real.len() != manifest.real || pairs.len() != manifest.pairs {
            return Err(DataError::Layout {
                path: root.to_path_buf(),
                reason: format!(
                    "manifest lists {} real / {} pairs, found {} / {}",
                    manifest.real,
                    manifest.pairs,
                    real.len(),
                    pairs.len()
                ),
            });
        }
        Ok(Self {
            real,
            pairs,
            corpus: manifest.corpus,
        })
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Held-out synthetic pairs, disjoint from the training seeds; their coarse
/// clips serve as evaluation controls. `coarseness` overrides the drawn tier.
pub fn heldout_pairs(
    count: usize,
    seed: u64,
    corpus: &CorpusConfig,
    coarseness: Option<Coarseness>,
) -> Result<Vec<ClipPair>, DataError> {
    (0..count)
        .map(|i| {
            let mut spec = synthetic_spec(item_seed(seed ^ HELDOUT_STREAM, i), corpus);
            if let Some(c) = coarseness {
                spec.coarseness = c;
            }
            Ok(pair_from_spec(spec)?)
        })
        .collect()
}

/// Held-out real-style clips.
pub fn heldout_real(count: usize, seed: u64, corpus: &CorpusConfig) -> Result<Vec<VideoClip>, DataError> {
    Ok(generate_real_corpus(seed ^ HELDOUT_STREAM ^ 0x5245_414c, count, corpus)?)
}
