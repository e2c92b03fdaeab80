//! Run configuration: one TOML document covering the trainer, the extractor,
//! the fusion network, and the synthetic data source. Unknown keys are
//! rejected; every field has a default, and the fully resolved document is
//! echoed into the output directory so any run is reproducible from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ExtractorSpec, HfnSpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// meta | joint_erm | fixed_identity | fixed_colorlbp
    pub mode: String,
    pub seed: u64,
    pub train: TrainSection,
    pub extractor: ExtractorSpec,
    pub hfn: HfnSpec,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: "meta".into(),
            seed: 0,
            train: TrainSection::default(),
            extractor: ExtractorSpec::default(),
            hfn: HfnSpec::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Learning rate for both the inner and outer updates.
    pub alpha: f64,
    /// Momentum of the fusion-network updates; the inner extractor steps
    /// are plain SGD.
    pub momentum: f64,
    /// Inner approximation steps per outer iteration.
    pub k_inner: usize,
    /// Outer iterations.
    pub steps: usize,
    /// Samples per class per domain in every batch.
    pub batch_per_class: usize,
    /// Held-out metric cadence in iterations; 0 disables.
    pub eval_every: usize,
    /// Periodic checkpoint cadence in iterations; 0 means final only.
    pub checkpoint_every: usize,
    /// Forward batch size during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            alpha: 0.001,
            momentum: 0.9,
            k_inner: 4,
            steps: 1500,
            batch_per_class: 4,
            eval_every: 0,
            checkpoint_every: 0,
            eval_batch: 32,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory with manifest.csv; empty string means generate in memory.
    pub path: String,
    /// Synthetic generation parameters, used when `path` is empty.
    pub domains: usize,
    pub per_class: usize,
    /// Domain held out from training (index); metrics in history.csv are
    /// computed on it. Negative disables.
    pub heldout_domain: i64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: String::new(),
            domains: 4,
            per_class: 40,
            heldout_domain: -1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode.as_str() {
            "meta" | "joint_erm" | "fixed_identity" | "fixed_colorlbp" => {}
            m => {
                return Err(Error::Config(format!(
                    "mode must be meta | joint_erm | fixed_identity | fixed_colorlbp, got '{m}'"
                )))
            }
        }
        if self.train.alpha <= 0.0 {
            return Err(Error::Config("train.alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(Error::Config("train.momentum must be in [0,1)".into()));
        }
        if self.train.steps == 0 {
            return Err(Error::Config("train.steps must be >= 1".into()));
        }
        if self.train.batch_per_class == 0 {
            return Err(Error::Config("train.batch_per_class must be >= 1".into()));
        }
        self.hfn.validate()?;
        if self.data.path.is_empty() && (self.data.domains == 0 || self.data.per_class == 0) {
            return Err(Error::Config(
                "data.domains and data.per_class must be >= 1 for synthetic data".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Fully resolved TOML document with every effective value.
    pub fn to_resolved_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.train.k_inner, 4);
        assert_eq!(cfg.train.alpha, 0.001);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.batch_per_class, 4);
        assert_eq!(cfg.mode, "meta");
    }

    #[test]
    fn partial_file_keeps_defaults_elsewhere() {
        let cfg = RunConfig::from_toml("mode = \"joint_erm\"\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.mode, "joint_erm");
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.k_inner, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("learning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("mode = \"sgd\"\n").is_err());
        assert!(RunConfig::from_toml("[train]\nalpha = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nmomentum = 1.0\n").is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = RunConfig::from_toml("seed = 9\n").unwrap();
        let text = cfg.to_resolved_toml().unwrap();
        assert!(text.contains("k_inner = 4"));
        assert!(text.contains("alpha = 0.001"));
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.seed, 9);
        assert_eq!(back.to_resolved_toml().unwrap(), text);
    }
}
