use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterConfig;
use crate::codec::{MAX_BITS, MIN_BITS};
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::mdp::MdpHyper;
use crate::model::ModelSpec;

/// Which bit policy drives the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Fixed(FixedConfig),
    Adaptive(AdaptiveConfig),
    Mqgrad(MdpHyper),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedConfig {
    pub bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Six ascending RMS cut points. When absent they are calibrated from a
    /// short 8-bit warmup run and written back into the resolved config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    #[serde(default = "AdaptiveConfig::default_warmup")]
    pub warmup_iters: usize,
}

impl AdaptiveConfig {
    fn default_warmup() -> usize {
        200
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ExperimentConfig::default_output_dir")]
    pub output_dir: PathBuf,
    /// Iterations between test-accuracy probes; 0 probes only at the end.
    #[serde(default = "ExperimentConfig::default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub data: DataSpec,
    pub policy: PolicyConfig,
}

impl ExperimentConfig {
    fn default_output_dir() -> PathBuf {
        PathBuf::from("out")
    }

    fn default_eval_every() -> usize {
        100
    }

    pub fn new(policy: PolicyConfig) -> Self {
        Self {
            seed: 0,
            output_dir: Self::default_output_dir(),
            eval_every: Self::default_eval_every(),
            cluster: ClusterConfig::default(),
            model: ModelSpec::default(),
            data: DataSpec::default(),
            policy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.cluster.validate(&self.model)?;
        if self.data.dim != self.model.input_dim() {
            return Err(Error::config(
                "data.dim",
                format!("{} but model input width is {}", self.data.dim, self.model.input_dim()),
            ));
        }
        if self.data.classes != self.model.num_classes() {
            return Err(Error::config(
                "data.classes",
                format!("{} but model output width is {}", self.data.classes, self.model.num_classes()),
            ));
        }
        match &self.policy {
            PolicyConfig::Fixed(f) => {
                if !(MIN_BITS..=MAX_BITS).contains(&f.bits) {
                    return Err(Error::config(
                        "policy.bits",
                        format!("{} outside the bit range [{MIN_BITS},{MAX_BITS}]", f.bits),
                    ));
                }
            }
            PolicyConfig::Adaptive(a) => {
                if let Some(t) = &a.thresholds {
                    crate::policy::AdaptiveNormPolicy::new(t)?;
                } else if a.warmup_iters == 0 {
                    return Err(Error::config(
                        "policy.warmup_iters",
                        "must be positive when thresholds are calibrated",
                    ));
                }
            }
            PolicyConfig::Mqgrad(h) => {
                h.validate()?;
                if self.cluster.cadence < 2 {
                    return Err(Error::config(
                        "cluster.cadence",
                        "the learned policy needs a window of at least 2",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config(&text)
    }
}

/// Parses and validates a config document. Unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}
