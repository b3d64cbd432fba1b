//! TOML run configuration. Every field has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evfuse_core::detector::DetectorConfig;
use evfuse_core::evalkit::EvalProtocol;
use evfuse_core::scenesim::SceneConfig;
use evfuse_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    /// Applied to the scene preset, detector initialization and training.
    pub seed: u64,
    pub scene: SceneSection,
    pub voxel: VoxelSection,
    /// Detector layout; the desk preset when absent.
    pub detector: Option<DetectorConfig>,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub duration_s: f64,
    /// Event tick rate, Hz.
    pub f_event: f64,
    /// RGB frame every this many ticks.
    pub rgb_divisor: usize,
    /// Freeze every object over `[start, end)` seconds.
    pub pause_s: Option<[f64; 2]>,
    /// Full scene description replacing the seeded desk preset.
    pub custom: Option<SceneConfig>,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            f_event: 25.0,
            rgb_divisor: 1,
            pause_s: None,
            custom: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelSection {
    /// Temporal bins per polarity.
    pub num_bins: usize,
}

impl Default for VoxelSection {
    fn default() -> Self {
        Self { num_bins: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Dataset directories.
    pub data: Vec<PathBuf>,
    /// Checkpoint to start from.
    pub init: Option<PathBuf>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub data: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// `gt_echo` or `empty` instead of a checkpoint.
    pub stub: Option<String>,
    /// Clear the recurrent state before every step.
    pub reset_state: bool,
    #[serde(flatten)]
    pub protocol: EvalProtocol,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if !(s.duration_s > 0.0) || !(s.f_event > 0.0) || s.rgb_divisor == 0 {
            bail!("scene duration, tick rate and RGB divisor must be positive");
        }
        if let Some([a, b]) = s.pause_s {
            if !(0.0 <= a && a < b) {
                bail!("pause interval [{a}, {b}) is empty or negative");
            }
        }
        self.scene_config().validate()?;
        if self.voxel.num_bins == 0 {
            bail!("voxel.num_bins must be positive");
        }
        if let Some(d) = &self.detector {
            if d.num_bins != self.voxel.num_bins {
                bail!(
                    "detector.num_bins = {} but voxel.num_bins = {}",
                    d.num_bins,
                    self.voxel.num_bins
                );
            }
        }
        self.detector_config().validate()?;
        self.train_config().validate()?;
        self.eval.protocol.validate()?;
        Ok(())
    }

    pub fn scene_config(&self) -> SceneConfig {
        let mut scene = self.scene.custom.clone().unwrap_or_else(|| SceneConfig::desk(self.seed));
        if let Some([a, b]) = self.scene.pause_s {
            scene = scene.with_pause((a * 1e6).round() as i64, (b * 1e6).round() as i64);
        }
        scene
    }

    pub fn detector_config(&self) -> DetectorConfig {
        let mut d = self.detector.clone().unwrap_or_else(DetectorConfig::desk);
        d.num_bins = self.voxel.num_bins;
        d.seed = self.seed;
        d
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.config.clone();
        t.seed = self.seed;
        t.fusion_mode = self.detector_config().fusion_mode;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.train_config().batch_size, 4);
        assert_eq!(c.train_config().max_lr, 1.5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nlearning_rate = 1.0").is_err());
        assert!(toml::from_str::<RunConfig>("[eval]\nprotocl = \"paired\"").is_err());
        assert!(toml::from_str::<RunConfig>("[detector]\nwidth = 64\ncolour = 1").is_err());
    }

    #[test]
    fn sections_parse_and_round_trip() {
        let text = r#"
            seed = 7
            [scene]
            duration_s = 4.0
            rgb_divisor = 10
            pause_s = [1.0, 2.0]
            [train]
            iterations = 50
            max_lr = 1e-3
            [train.time_shift]
            enabled = false
            [eval]
            kind = "rgb_mismatch"
            rgb_divisors = [1, 3]
        "#;
        let c: RunConfig = toml::from_str(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.train_config().iterations, 50);
        assert!(!c.train_config().time_shift.enabled);
        assert_eq!(c.train_config().seed, 7);
        assert_eq!(c.detector_config().seed, 7);
        assert_eq!(c.eval.protocol.rgb_divisors, [1, 3]);
        assert_eq!(c.scene_config().objects[0].motion.pauses, [(1_000_000, 2_000_000)]);
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
