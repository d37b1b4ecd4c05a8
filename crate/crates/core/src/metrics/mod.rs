//! Proxy metrics computed against generator ground truth: structure
//! following, prompt adherence and appearance leakage.

mod adherence;
pub mod detect;
mod leakage;
mod stats;
mod structure;

use serde::{Deserialize, Serialize};

pub use adherence::{
    adherence_score, background_features, classify_background, classify_shape, color_matches,
    hue_distance, AdherenceScore, BackgroundClassifier, HUE_TOLERANCE,
};
pub use leakage::{hue_histogram, leakage_score, pearson, LeakageScore, HUE_BINS};
pub use stats::{mean_std, ranks, spearman};
pub use structure::{structure_score, StructureScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub structure: f64,
    pub adherence: f64,
    pub leakage: f64,
    #[serde(default)]
    pub undetected: bool,
    #[serde(default)]
    pub leakage_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            count: values.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub checkpoint_hash: Option<String>,
    pub p_real: Option<f64>,
    pub policy: Option<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub caveats: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ClipScores>,
    pub structure: Aggregate,
    pub adherence: Aggregate,
    pub leakage: Aggregate,
    pub metadata: RunMetadata,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<ClipScores>, metadata: RunMetadata) -> Self {
        let col = |f: fn(&ClipScores) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Self {
            structure: Aggregate::of(&col(|r| r.structure)),
            adherence: Aggregate::of(&col(|r| r.adherence)),
            leakage: Aggregate::of(&col(|r| r.leakage)),
            rows,
            metadata,
        }
    }

    /// Aggregates agree with the per-clip rows and every score is in range.
    pub fn is_consistent(&self) -> bool {
        let again = Self::from_rows(self.rows.clone(), self.metadata.clone());
        let in_range = self.rows.iter().all(|r| {
            (0.0..=1.0).contains(&r.structure)
                && (0.0..=1.0).contains(&r.adherence)
                && (-1.0..=1.0).contains(&r.leakage)
        });
        in_range
            && again.structure == self.structure
            && again.adherence == self.adherence
            && again.leakage == self.leakage
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_aggregates_recompute() {
        let rows = vec![
            ClipScores {
                clip_id: "a".into(),
                structure: 0.5,
                adherence: 0.25,
                leakage: 0.1,
                undetected: false,
                leakage_degenerate: false,
            },
            ClipScores {
                clip_id: "b".into(),
                structure: 0.7,
                adherence: 0.75,
                leakage: -0.3,
                undetected: false,
                leakage_degenerate: false,
            },
        ];
        let r = MetricReport::from_rows(rows, RunMetadata::default());
        assert!((r.structure.mean - 0.6).abs() < 1e-12);
        assert_eq!(r.adherence.count, 2);
        assert!(r.is_consistent());
    }
}
