//! Run configuration: a TOML document whose keys mirror the method's
//! symbols (`tau1`, `tau2`, `softplus_beta`, `sine_gamma`, `recurrence`).
//!
//! Optional keys left out of a file fall back to per-sampler defaults
//! ([`Resolved`]), taken from the published settings for each sampler.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{LabelRule, DEFAULT_BINS};
use crate::classifier::TrainParams;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceInput, Normalization};
use crate::mixture::MixtureSpec;
use crate::samplers::SamplerKind;
use crate::schedule::{PosteriorVariance, ScheduleMode};

/// Whether the analytic diffusion model conditions on the target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Full-mixture scores; the class comes only from guidance.
    #[default]
    Unconditional,
    /// Scores of the target class component.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Logits are the exact log-joints of the target mixture.
    #[default]
    Bayes,
    /// A small MLP, loaded from `path` or trained on draws from the mixture.
    Smallnet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Defaults to `1e-4 · 1000/steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    /// Defaults to `0.02 · 1000/steps`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    pub posterior_variance: PosteriorVariance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 250, beta_start: None, beta_end: None, posterior_variance: PosteriorVariance::Beta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmConfig {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self { steps: 36, sigma_min: 0.002, sigma_max: 40.0, rho: 7.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSettings {
    pub enabled: bool,
    pub input: GuidanceInput,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau2: Option<f64>,
    /// DDPM: multiplier on `σ_t`; EDM: constant base; CFG: injection base.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    pub schedule: ScheduleMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sine_gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    pub recurrence: usize,
    pub chain_rule: bool,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            input: GuidanceInput::PredictedX0,
            tau1: None,
            tau2: None,
            scale: None,
            schedule: ScheduleMode::Sine,
            sine_gamma: None,
            normalization: None,
            recurrence: 1,
            chain_rule: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    /// Saved SmallNet; when absent one is trained from mixture draws.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Replaces the hidden ReLUs with Softplus of this sharpness at guidance
    /// time. Defaults per sampler.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub softplus_beta: Option<f64>,
    /// Keep the raw ReLU network (no smoothing).
    pub relu: bool,
    pub hidden: Vec<usize>,
    pub train_samples: usize,
    pub train: TrainParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ClassifierKind::Bayes,
            path: None,
            softplus_beta: None,
            relu: false,
            hidden: vec![64, 64],
            train_samples: 4000,
            train: TrainParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfgConfig {
    /// Classifier-free scale `s ≥ 1`.
    pub scale: f64,
    /// Add the normalized classifier gradient to the CFG direction.
    pub inject: bool,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self { scale: 1.5, inject: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub labels: LabelRule,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, labels: LabelRule::ConditioningClass }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub batch: usize,
    /// Target class `y`, 0-based.
    pub class: usize,
    pub sampler: SamplerKind,
    pub conditioning: Conditioning,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub mixture: MixtureSpec,
    pub schedule: ScheduleConfig,
    pub edm: EdmConfig,
    pub guidance: GuidanceSettings,
    pub classifier: ClassifierConfig,
    pub cfg: CfgConfig,
    pub calibration: CalibrationConfig,
}

/// The illustrative three-class 2D benchmark: well separated, with unequal
/// weights and anisotropic covariances.
pub fn default_mixture() -> MixtureSpec {
    MixtureSpec {
        weights: vec![0.3, 0.3, 0.4],
        means: vec![vec![-3.0, 0.0], vec![3.0, 0.0], vec![0.0, 4.0]],
        covariances: vec![
            vec![vec![1.0, 0.3], vec![0.3, 0.8]],
            vec![vec![0.8, -0.2], vec![-0.2, 1.0]],
            vec![vec![1.2, 0.0], vec![0.0, 0.6]],
        ],
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 10_000,
            class: 2,
            sampler: SamplerKind::Ddpm,
            conditioning: Conditioning::Unconditional,
            out: None,
            mixture: default_mixture(),
            schedule: ScheduleConfig::default(),
            edm: EdmConfig::default(),
            guidance: GuidanceSettings::default(),
            classifier: ClassifierConfig::default(),
            cfg: CfgConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

/// Guidance hyperparameters after per-sampler defaults are filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub tau1: f64,
    pub tau2: f64,
    pub scale: f64,
    pub sine_gamma: f64,
    pub softplus_beta: f64,
    pub normalization: Normalization,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Per-sampler defaults: DDPM τ₂=0.5, β=3, γ=0.3; EDM τ₂=0, β=5, γ=0.3;
    /// CFG τ₁=1.1, τ₂=0.5, β=6, γ=0.2.
    pub fn resolved(&self) -> Resolved {
        let g = &self.guidance;
        let (tau1, tau2, scale, gamma, beta, norm) = match self.sampler {
            SamplerKind::Ddpm => (1.0, 0.5, 0.2, 0.3, 3.0, Normalization::None),
            SamplerKind::Edm => (1.0, 0.0, 0.05, 0.3, 5.0, Normalization::UnitGradient),
            SamplerKind::Cfg => (1.1, 0.5, 1.0, 0.2, 6.0, Normalization::MatchCfgDelta),
        };
        Resolved {
            tau1: g.tau1.unwrap_or(tau1),
            tau2: g.tau2.unwrap_or(tau2),
            scale: g.scale.unwrap_or(scale),
            sine_gamma: g.sine_gamma.unwrap_or(gamma),
            softplus_beta: self.classifier.softplus_beta.unwrap_or(beta),
            normalization: g.normalization.unwrap_or(norm),
        }
    }

    /// Structural checks that do not need the mixture to be built.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        let k = self.mixture.weights.len();
        if self.class >= k {
            return bad(format!("class {} out of range for a {k}-class mixture", self.class));
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be positive".into());
        }
        if self.edm.steps < 2 {
            return bad("edm.steps must be at least 2".into());
        }
        if self.guidance.recurrence == 0 {
            return bad("guidance.recurrence must be at least 1".into());
        }
        if self.calibration.bins == 0 {
            return bad("calibration.bins must be at least 1".into());
        }
        let r = self.resolved();
        for (name, v) in [("tau1", r.tau1), ("tau2", r.tau2), ("scale", r.scale), ("sine_gamma", r.sine_gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("guidance.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(r.softplus_beta.is_finite() && r.softplus_beta > 0.0) {
            return bad(format!("classifier.softplus_beta must be positive, got {}", r.softplus_beta));
        }
        if !(self.cfg.scale.is_finite() && self.cfg.scale >= 1.0) {
            return bad(format!("cfg.scale must be >= 1, got {}", self.cfg.scale));
        }
        if self.sampler != SamplerKind::Cfg && r.normalization == Normalization::MatchCfgDelta {
            return bad("match_cfg_delta normalization is only meaningful for the cfg sampler".into());
        }
        if self.sampler == SamplerKind::Cfg && r.normalization != Normalization::MatchCfgDelta {
            return bad("the cfg sampler injects the gradient with match_cfg_delta normalization".into());
        }
        if self.classifier.kind == ClassifierKind::Smallnet
            && self.classifier.path.is_none()
            && (self.classifier.train_samples == 0 || self.classifier.hidden.contains(&0))
        {
            return bad("classifier training needs samples and non-empty hidden layers".into());
        }
        Ok(())
    }
}
