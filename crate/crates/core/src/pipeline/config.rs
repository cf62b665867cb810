//! Pipeline configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::GLOBAL_ATTENTION_CAP;
use crate::error::{Error, Result};
use crate::supervision::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelConfig {
    /// Metres.
    pub voxel_size: f64,
    /// Width at full resolution; doubles per internal downsampling.
    pub channels: usize,
    /// Internal downsampling steps of the down flow.
    pub depth: usize,
    pub window: u32,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Sparsify with ground-truth occupancy while training.
    pub teacher_forcing: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-4, teacher_forcing: true, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// F-score threshold in metres.
    pub tau: f64,
    pub samples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { tau: 0.05, samples: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Channels of the per-view 2D feature maps.
    pub feature_channels: usize,
    pub occupancy_threshold: f64,
    pub global_cap: usize,
    /// Upper bound on internal widths; `None` leaves the doubling unbounded.
    pub max_channels: Option<usize>,
    pub fine: LevelConfig,
    pub medium: LevelConfig,
    pub coarse: LevelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            feature_channels: 8,
            occupancy_threshold: 0.5,
            global_cap: GLOBAL_ATTENTION_CAP,
            max_channels: None,
            fine: LevelConfig { voxel_size: 0.04, channels: 64, depth: 4, window: 10, heads: 4 },
            medium: LevelConfig { voxel_size: 0.08, channels: 48, depth: 3, window: 10, heads: 4 },
            coarse: LevelConfig { voxel_size: 0.16, channels: 32, depth: 2, window: 10, heads: 4 },
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("plain config")
    }

    /// Level 0 is fine, 2 is coarse.
    pub fn level(&self, level: usize) -> &LevelConfig {
        match level {
            0 => &self.fine,
            1 => &self.medium,
            _ => &self.coarse,
        }
    }

    /// Width at each internal depth of a level, `depth + 1` entries.
    pub fn widths(&self, level: usize) -> Vec<usize> {
        let l = self.level(level);
        (0..=l.depth)
            .map(|k| {
                let w = l.channels << k;
                self.max_channels.map_or(w, |m| w.min(m))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels == 0 {
            return Err(Error::InvalidInput("feature_channels must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.occupancy_threshold) {
            return Err(Error::InvalidInput(format!("occupancy threshold {}", self.occupancy_threshold)));
        }
        for level in 0..3 {
            let l = self.level(level);
            if !(l.voxel_size > 0.0) || l.window == 0 || l.heads == 0 {
                return Err(Error::InvalidInput(format!("level {level}: voxel size, window and heads must be positive")));
            }
            for w in self.widths(level) {
                if w == 0 || w % l.heads != 0 {
                    return Err(Error::InvalidInput(format!("level {level}: width {w} not divisible by {} heads", l.heads)));
                }
            }
        }
        for level in 1..3 {
            let ratio = self.level(level).voxel_size / self.level(level - 1).voxel_size;
            if (ratio - 2.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("voxel size must double from level {} to {level}", level - 1)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.widths(0), vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn partial_file_and_rejections() {
        let c = PipelineConfig::from_toml("seed = 3\nmax_channels = 128\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.widths(0), vec![64, 128, 128, 128, 128]);
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
        let mut bad = PipelineConfig::default();
        bad.medium.voxel_size = 0.1;
        assert!(bad.validate().is_err());
        bad = PipelineConfig::default();
        bad.fine.heads = 5;
        assert!(bad.validate().is_err());
    }
}
