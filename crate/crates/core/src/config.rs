//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ans::AnsConfig;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_KS;
use crate::optim::DEFAULT_LR;
use crate::sampler::{SamplerConfig, SamplerKind};
use crate::synthetic::SyntheticConfig;

/// Where interactions come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Latent-factor data, split per user at random.
    Synthetic {
        #[serde(default)]
        generator: SyntheticConfig,
        #[serde(default = "default_ratios")]
        ratios: [f64; 3],
    },
    /// An interaction log in `user item [timestamp]` form.
    File {
        path: PathBuf,
        #[serde(default)]
        has_timestamp: bool,
        split: SplitConfig,
    },
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    TimestampCut {
        cutoff: i64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    Random {
        #[serde(default = "default_ratios")]
        ratios: [f64; 3],
    },
}

fn default_val_fraction() -> f64 {
    0.1
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            generator: SyntheticConfig::default(),
            ratios: default_ratios(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    /// Epochs after which score histograms are taken; 0 is before training.
    pub checkpoints: Vec<usize>,
    pub histogram_pairs: usize,
    pub histogram_bins: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: false,
            checkpoints: vec![0, 30, 50],
            histogram_pairs: 100_000,
            histogram_bins: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub sampler: SamplerKind,
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// First-pass candidate count for DNS and ANS.
    pub candidates: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub noise_high: f64,
    pub mag_clamp: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    /// Keep the three gate tensors at their initial values.
    pub freeze_gates: bool,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ans = AnsConfig::default();
        RunConfig {
            seed: 2023,
            dataset: DatasetConfig::default(),
            sampler: SamplerKind::Ans,
            dim: 64,
            lr: DEFAULT_LR,
            batch_size: 2048,
            lambda: 1e-4,
            candidates: 8,
            gamma: 0.1,
            epsilon: ans.epsilon,
            noise_high: ans.noise_high,
            mag_clamp: ans.mag_clamp,
            max_epochs: 200,
            patience: 10,
            eval_ks: DEFAULT_KS.to_vec(),
            freeze_gates: false,
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            m: self.candidates,
            ans: AnsConfig {
                epsilon: self.epsilon,
                noise_high: self.noise_high,
                mag_clamp: self.mag_clamp,
            },
        }
    }

    /// The K used for model selection and run comparison.
    pub fn selection_k(&self) -> usize {
        if self.eval_ks.contains(&20) {
            20
        } else {
            *self.eval_ks.iter().max().unwrap_or(&20)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!(
                "lambda {} must be finite and non-negative",
                self.lambda
            ));
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!(
                "gamma {} must be finite and non-negative",
                self.gamma
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} must lie in [0, 1]", self.epsilon));
        }
        if !(self.noise_high.is_finite() && self.noise_high >= 0.0) {
            return bad(format!(
                "noise_high {} must be finite and non-negative",
                self.noise_high
            ));
        }
        if !(self.mag_clamp.is_finite() && self.mag_clamp > 0.0) {
            return bad(format!("mag_clamp {} must be positive", self.mag_clamp));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks must be non-empty and positive".into());
        }
        let d = &self.diagnostics;
        if d.enabled && (d.histogram_pairs == 0 || d.histogram_bins < 2) {
            return bad("diagnostics need at least one pair and two bins".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic { generator, ratios } => {
                generator.validate()?;
                check_ratios(ratios)?;
            }
            DatasetConfig::File {
                split,
                has_timestamp,
                ..
            } => match split {
                SplitConfig::TimestampCut { val_fraction, .. } => {
                    if !has_timestamp {
                        return bad("timestamp_cut split needs has_timestamp = true".into());
                    }
                    if !(0.0..1.0).contains(val_fraction) {
                        return bad(format!("val_fraction {val_fraction} must lie in [0, 1)"));
                    }
                }
                SplitConfig::Random { ratios } => check_ratios(ratios)?,
            },
        }
        Ok(())
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios {r:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}
