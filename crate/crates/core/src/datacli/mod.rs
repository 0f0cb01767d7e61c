//! Datasets on disk, synthetic cores, run configuration, checkpoints and
//! the end-to-end pipeline behind the command-line tool.

pub mod checkpoint;
mod dataset;
mod pipeline;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gatsan::Stage2Config;
use crate::graphbuild::{DEFAULT_SCALE_THRESHOLD, DEFAULT_SPATIAL_THRESHOLD};
use crate::milnet::{MilDims, TrainConfig};
use crate::saliency::{FusionConfig, Variant};
use crate::xmetrics::{Averaging, ThresholdGrid};

pub use dataset::{
    load_dataset, CoreEntry, CoreRecord, DatasetManifest, FeatureDataset, Mask, PatchRecord, Split, FORMAT_VERSION,
    MANIFEST_FILE,
};
pub use pipeline::{
    all_methods, build_graphs, export_graphs, compare_reports, compute_saliency, evaluate_saliency, export_metrics,
    export_saliency, import_reports, import_saliency, method_dir, run_pipeline, saliency_cores, stage_build_graphs, stage_eval, stage_saliency, stage_train_mil,
    stage_train_ssl, train_mil,
    train_ssl, write_run_manifest, CoreSaliency, RunLayout, RunSummary, SaliencyIndexEntry, METHOD_GRADIENT,
    METHOD_MIL, METHOD_RANDOM, METHOD_UNIFORM,
};
pub use synth::{synth_generate, BlobSpec, SynthConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "GRAPHITE_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no manifest found in {0}")]
    NoManifest(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("core {core_id}: {msg}")]
    Core { core_id: String, msg: String },
    #[error("synthetic data: {0}")]
    Synth(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("{stage}: {msg}")]
    Stage { stage: &'static str, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl DataError {
    /// True for failures caused by bad input rather than by a run going wrong.
    pub fn is_validation(&self) -> bool {
        !matches!(self, DataError::Stage { .. } | DataError::Io { .. })
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            DataError::Checkpoint(msg) => DataError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        }
    }

    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(String) -> DataError {
        move |msg| DataError::Stage { stage, msg }
    }
}

/// Hidden widths of the Stage-1 network; the input width comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MilWidths {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub key_dim: usize,
    pub patient_hidden_dim: usize,
}

impl Default for MilWidths {
    fn default() -> Self {
        let d = MilDims::new(1);
        Self {
            hidden_dim: d.hidden_dim,
            embed_dim: d.embed_dim,
            key_dim: d.key_dim,
            patient_hidden_dim: d.patient_hidden_dim,
        }
    }
}

impl MilWidths {
    pub fn dims(&self, input_dim: usize) -> MilDims {
        MilDims {
            input_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            key_dim: self.key_dim,
            patient_hidden_dim: self.patient_hidden_dim,
        }
    }
}

/// Node scores painted into the per-level maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelScore {
    /// SAN level weight `s` alone.
    San,
    /// `s` times the Stage-1 score of the node as a one-patch bag. `s` has no
    /// class direction of its own; the product keeps its cross-level
    /// weighting while pointing the map at what the classifier calls tumour.
    #[default]
    SanRelevance,
}

impl std::str::FromStr for LevelScore {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "san" => Ok(LevelScore::San),
            "san_relevance" | "san-relevance" => Ok(LevelScore::SanRelevance),
            _ => Err(DataError::Config(format!("unknown level score {s:?} (expected san or san_relevance)"))),
        }
    }
}

/// Everything a pipeline run depends on besides the dataset. The master
/// `seed` overrides the seeds inside `stage1` and `stage2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub spatial_threshold: f64,
    pub scale_threshold: f64,
    pub fusion: FusionConfig,
    pub level_scores: LevelScore,
    pub mil: MilWidths,
    pub stage1: TrainConfig,
    pub stage2: Stage2Config,
    /// Fraction of each training class held out for early stopping.
    pub val_fraction: f64,
    pub seed: u64,
    /// Headline variant; all three are always computed and reported.
    pub variant: Variant,
    pub grid: ThresholdGrid,
    pub averaging: Averaging,
    pub output_dir: Option<PathBuf>,
    /// Load checkpoints from the output directory instead of training.
    pub skip_train: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spatial_threshold: DEFAULT_SPATIAL_THRESHOLD,
            scale_threshold: DEFAULT_SCALE_THRESHOLD,
            fusion: FusionConfig::default(),
            level_scores: LevelScore::default(),
            mil: MilWidths::default(),
            stage1: TrainConfig::default(),
            stage2: Stage2Config::default(),
            val_fraction: 0.2,
            seed: 0,
            variant: Variant::V2,
            grid: ThresholdGrid::default(),
            averaging: Averaging::Pooled,
            output_dir: None,
            skip_train: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let cfg = |e: String| DataError::Config(e);
        for (name, v) in [("spatial_threshold", self.spatial_threshold), ("scale_threshold", self.scale_threshold)] {
            if !(v > 0.0) {
                return Err(cfg(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(cfg(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.stage2.tau > 0.0) {
            return Err(cfg(format!("tau must be positive, got {}", self.stage2.tau)));
        }
        let m = &self.mil;
        if m.hidden_dim == 0 || m.embed_dim == 0 || m.key_dim == 0 || m.patient_hidden_dim == 0 {
            return Err(cfg("MIL widths must be positive".into()));
        }
        self.fusion.validate().map_err(|e| cfg(e.to_string()))?;
        self.stage1.validate().map_err(|e| cfg(format!("stage1: {e}")))?;
        self.stage2.train.validate().map_err(|e| cfg(format!("stage2: {e}")))?;
        self.grid.validate().map_err(|e| cfg(e.to_string()))?;
        Ok(())
    }

    /// Reads a JSON config; absent fields keep their defaults.
    pub fn from_json_file(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Config(format!("{}: {e}", path.display())))
    }

    /// `output_dir`, else `$GRAPHITE_OUTPUT_ROOT`, else `./graphite-out`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| {
            std::env::var_os(OUTPUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("graphite-out"))
        })
    }

    pub(crate) fn stage1_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.stage1
        }
    }

    pub(crate) fn stage2_config(&self) -> Stage2Config {
        let mut c = self.stage2;
        c.train.seed = self.seed.wrapping_add(1);
        c
    }
}
