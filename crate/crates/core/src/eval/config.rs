use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AnomalyKind, SynthConfig};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::numerics::AdamConfig;
use crate::skeleton::GraphSpec;

use super::scores::ScoringConfig;

/// Everything a run needs. Defaults: K = 8, prior mean 3, Adam at 5e-4,
/// 8 epochs, batch 256, 3×7 attention kernels, max pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub flow: FlowConfig,
    pub graph: GraphSpec,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Window stride when segmenting tracks.
    pub stride: usize,
    /// Keep keypoint confidence as a third channel (`flow.channels` must be 3).
    pub keep_confidence: bool,
    pub scoring: ScoringConfig,
    pub benchmark: BenchmarkConfig,
    pub zero_train: ZeroTrainConfig,
    pub noise_scales: Vec<f64>,
    pub contamination_fractions: Vec<f64>,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            flow: FlowConfig::default(),
            graph: GraphSpec::default(),
            optimizer: AdamConfig::default(),
            epochs: 8,
            batch_size: 256,
            seed: 0,
            stride: 1,
            keep_confidence: false,
            scoring: ScoringConfig::default(),
            benchmark: BenchmarkConfig::default(),
            zero_train: ZeroTrainConfig::default(),
            noise_scales: vec![0.0, 0.01, 0.02, 0.05, 0.1],
            contamination_fractions: vec![0.0, 0.05, 0.1],
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.flow.validate()?;
        let channels = if self.keep_confidence { 3 } else { 2 };
        if self.flow.channels != channels {
            return Err(Error::Invalid(format!(
                "keep_confidence = {} implies {channels} channels, flow.channels is {}",
                self.keep_confidence, self.flow.channels
            )));
        }
        if self.graph.joints != self.flow.joints {
            return Err(Error::Invalid(format!(
                "graph has {} joints, flow.joints is {}",
                self.graph.joints, self.flow.joints
            )));
        }
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Invalid(
                "batch_size and stride must be positive".into(),
            ));
        }
        if self
            .noise_scales
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return Err(Error::Invalid(
                "noise scales must be finite and >= 0".into(),
            ));
        }
        if self
            .contamination_fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return Err(Error::Invalid(
                "contamination fractions must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Canonical JSON form, echoed into checkpoints.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Layout of the synthetic benchmark produced by `synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub synth: SynthConfig,
    /// Normal training tracks and their length in frames.
    pub train_tracks: usize,
    pub train_frames: usize,
    /// Test videos (one person each) and their length in frames.
    pub test_normal_videos: usize,
    pub test_anomalous_videos: usize,
    pub test_frames: usize,
    /// Anomaly families and onset for test videos.
    pub test_kinds: Vec<AnomalyKind>,
    pub test_onset: Option<usize>,
    /// Anomalous tracks windowed into the contamination pool.
    pub pool_tracks: usize,
    pub pool_frames: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_tracks: 100,
            train_frames: 43,
            test_normal_videos: 10,
            test_anomalous_videos: 10,
            test_frames: 50,
            test_kinds: vec![AnomalyKind::Fall, AnomalyKind::Run],
            test_onset: Some(0),
            pool_tracks: 20,
            pool_frames: 43,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroTrainConfig {
    pub trials: usize,
    /// Std of the random output projections; untrained couplings need a
    /// nonzero one to be anything but the identity.
    pub projection_std: f64,
    /// Run trials on the rayon pool. Results do not depend on it.
    pub parallel: bool,
}

impl Default for ZeroTrainConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            projection_std: 0.1,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}
