//! Run configuration: a single TOML file with command-line overrides
//! (overrides win), frozen next to every run's outputs for replay.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn default_multiplier() -> f64 {
    0.008
}
fn default_delay() -> f64 {
    0.5
}
fn default_chunk() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    7
}
fn default_attack() -> String {
    "predictive".into()
}
fn default_defense() -> String {
    "none".into()
}
fn default_epochs() -> usize {
    4
}
fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    1.5e-4
}
fn default_gamma() -> f64 {
    0.99
}
fn default_beam_width() -> usize {
    8
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

/// Command-scoped settings shared by the CLI and resolved once per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub dev_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    #[serde(default)]
    pub asr_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub robust_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub predictor_checkpoint: Option<PathBuf>,
    #[serde(default = "default_attack")]
    pub attack: String,
    #[serde(default = "default_defense")]
    pub defense: String,
    #[serde(default = "default_multiplier")]
    pub multiplier: f64,
    #[serde(default = "default_delay")]
    pub delay: f64,
    #[serde(default = "default_chunk")]
    pub chunk_duration: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_gamma")]
    pub lr_anneal_gamma: f64,
    #[serde(default = "default_beam_width")]
    pub beam_width: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Predictor channel divisor (1 = full size, 4 = desk scale).
    #[serde(default)]
    pub predictor_scale: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults are total")
    }
}

impl RunConfig {
    /// Load from a TOML file, or defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    /// Write the resolved configuration next to the run outputs.
    pub fn freeze(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("config.frozen.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize config: {e}")))?;
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn clock(&self) -> crate::schedule::StreamClock {
        crate::schedule::StreamClock {
            delay: self.delay,
            chunk_duration: self.chunk_duration,
            context_duration: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multiplier < 0.0 {
            return Err(Error::config("multiplier must be non-negative"));
        }
        self.clock().validate()?;
        Ok(())
    }
}

/// Compute-device selection hook. Only the CPU backend exists today; the
/// variable is honored so scripted runs fail loudly on wrong assumptions.
pub fn check_device_env() -> Result<()> {
    match std::env::var("ASRJAM_DEVICE") {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(Error::config(format!(
            "ASRJAM_DEVICE={v} is not available (only \"cpu\" is supported)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_canonical_constants() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.multiplier, 0.008);
        assert_eq!(cfg.delay, 0.5);
        assert_eq!(cfg.chunk_duration, 0.5);
        assert_eq!(cfg.epochs, 4);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.lr, 1.5e-4);
        assert_eq!(cfg.lr_anneal_gamma, 0.99);
    }

    #[test]
    fn load_freeze_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "multiplier = 0.05\ndelay = 0.75\n").unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.multiplier, 0.05);
        assert_eq!(cfg.delay, 0.75);
        let frozen = cfg.freeze(dir.path()).unwrap();
        let reloaded = RunConfig::load(Some(&frozen)).unwrap();
        assert_eq!(reloaded.multiplier, 0.05);
        assert_eq!(reloaded.delay, 0.75);
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "multiplier = \"loud\"").unwrap();
        assert!(matches!(
            RunConfig::load(Some(&path)),
            Err(Error::Config(_))
        ));
    }
}
