use std::path::{Path, PathBuf};

use mvwin::camera::AdapterConfig;
use mvwin::camera::RayConvention;
use mvwin::music::SegmentationSettings;
use mvwin::preference::ScoreWeights;
use mvwin::{FusionPolicy, SchedulerParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run needs besides its input files. Loaded from `--config`;
/// flags override individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scheduler: SchedulerParams,
    pub fusion: FusionPolicy,
    pub adapter: AdapterConfig,
    pub segmentation: SegmentationSettings,
    pub weights: ScoreWeights,
    pub demo: DemoSettings,
    pub camera: CameraSettings,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSettings {
    /// Latent channels per frame.
    pub latent_dim: usize,
    /// Latent frames per second of music in `pipeline`.
    pub fps: f64,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self { latent_dim: 4, fps: 8.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSettings {
    pub convention: RayConvention,
    /// Rows of the camera embedding; `None` keeps one row per pose.
    pub latent_frames: Option<usize>,
}

impl Default for CameraSettings {
    fn default() -> Self {
        Self { convention: RayConvention::Rotated, latent_frames: None }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = crate::read_input(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
    }

    /// Checks the parts every command depends on; module-specific
    /// validation happens where each part is used.
    pub fn validate(&self) -> Result<(), CliError> {
        self.weights.validate().map_err(CliError::invalid)?;
        let s = &self.segmentation;
        if s.hop == 0 || s.frame_len < s.hop {
            return Err(CliError::Invalid(format!(
                "segmentation needs frame_len >= hop >= 1, got frame_len={}, hop={}",
                s.frame_len, s.hop
            )));
        }
        if !(s.bar_tolerance >= 0.0) {
            return Err(CliError::Invalid(format!("bar_tolerance must be >= 0, got {}", s.bar_tolerance)));
        }
        if self.demo.latent_dim == 0 {
            return Err(CliError::Invalid("latent_dim must be at least 1".into()));
        }
        if !(self.demo.fps > 0.0) || !self.demo.fps.is_finite() {
            return Err(CliError::Invalid(format!("fps must be positive, got {}", self.demo.fps)));
        }
        Ok(())
    }
}
