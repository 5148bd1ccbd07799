//! The single configuration file shared by every subcommand.
//!
//! ```toml
//! [data]        # corpus generator settings
//! [train]       # objective, optimizer, model size, schedule
//! [experiment]  # seeds, alpha grid, objectives, jobs
//! [paths]       # data_dir, output_dir, checkpoints, input_dir
//! ```
//!
//! Every table and key is optional; unknown keys are rejected. Command-line
//! flags override the file, and the file overrides the built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use mixqa::data::GenConfig;
use mixqa::experiment::ExperimentPlan;
use mixqa::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MIXQA_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Checkpoints read by `analyze`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checkpoints: Vec<PathBuf>,
    /// Experiment directory read by `report`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentPlan,
    pub paths: Paths,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {}", path.display(), e.message()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Flag, then file, then `$MIXQA_OUT`, then `./runs`.
    pub fn output_root(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    /// Flag, then file, then `<output root>/data`.
    pub fn data_dir(&self, flag: Option<&Path>, root: &Path) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.data_dir.clone())
            .unwrap_or_else(|| root.join("data"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.message().contains("learning_rate"), "{}", err.message());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.train.alpha = 0.01;
        c.train.optimizer.epsilon = 1e-6;
        c.experiment.alpha_grid = vec![0.01, 0.1, 100.0];
        c.paths.data_dir = Some("d".into());
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
