//! Time discretizations for the DDPM and EDM samplers and the guidance
//! scale schedule.
//!
//! DDPM steps are indexed `t = 1..=T` with `t = T` the noisiest; `ᾱ_0 = 1`.
//! EDM grid points are indexed `i = 0..N` from `σ_max` down to `σ_min`, with
//! a trailing boundary value `0` at index `N`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which reverse-process variance the DDPM sampler uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorVariance {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`; `β̃_1` is replaced by `β̃_2`
    /// so that every step has positive variance.
    BetaTilde,
}

/// Discrete variance-preserving noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    variance: Vec<f64>,
    kind: PosteriorVariance,
}

impl NoiseSchedule {
    /// `β_t` linearly interpolated from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!("need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Linear schedule whose β range is the 1000-step `[1e-4, 0.02]` range
    /// stretched by `1000 / T`, so that `ᾱ_T` is close to zero for any `T`.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let stretch = 1000.0 / steps as f64;
        Self::linear(steps, (1e-4 * stretch).min(0.999), (0.02 * stretch).min(0.999))
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut sched = Self { variance: beta.clone(), beta, alpha, alpha_bar, kind: PosteriorVariance::Beta };
        sched.set_variance(PosteriorVariance::Beta);
        Ok(sched)
    }

    pub fn with_variance(mut self, kind: PosteriorVariance) -> Self {
        self.set_variance(kind);
        self
    }

    fn set_variance(&mut self, kind: PosteriorVariance) {
        self.kind = kind;
        self.variance = match kind {
            PosteriorVariance::Beta => self.beta.clone(),
            PosteriorVariance::BetaTilde => {
                let steps = self.beta.len();
                let tilde = |t: usize| (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t);
                (1..=steps)
                    .map(|t| match (t, steps) {
                        (1, 1) => self.beta(1),
                        (1, _) => tilde(2),
                        _ => tilde(t),
                    })
                    .collect()
            }
        };
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn variance_kind(&self) -> PosteriorVariance {
        self.kind
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-process variance `σ_t²`.
    pub fn variance(&self, t: usize) -> f64 {
        self.variance[t - 1]
    }

    /// Reverse-process standard deviation.
    pub fn sigma(&self, t: usize) -> f64 {
        self.variance(t).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Karras-style warped noise-level grid for the EDM ODE sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct EdmTimeGrid {
    levels: Vec<f64>,
    rho: f64,
}

impl EdmTimeGrid {
    /// `t_i = (σ_max^{1/ρ} + i/(N−1)·(σ_min^{1/ρ} − σ_max^{1/ρ}))^ρ` for `i < N`, then `0`.
    pub fn new(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> Result<Self> {
        if steps < 2 {
            return Err(invalid("EDM grid needs at least two steps"));
        }
        if !(sigma_min > 0.0 && sigma_max > 0.0) {
            return Err(invalid("EDM noise levels must be positive"));
        }
        if sigma_min >= sigma_max {
            return Err(invalid(format!("need sigma_min < sigma_max, got {sigma_min} and {sigma_max}")));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(invalid(format!("rho must be positive, got {rho}")));
        }
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let mut levels: Vec<f64> =
            (0..steps).map(|i| (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(rho)).collect();
        // pin the endpoints against powf round-off
        levels[0] = sigma_max;
        levels[steps - 1] = sigma_min;
        levels.push(0.0);
        Ok(Self { levels, rho })
    }

    /// Number of grid points excluding the trailing zero.
    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, i: usize) -> f64 {
        self.levels[i]
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn sigma_max(&self) -> f64 {
        self.levels[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Linear,
    #[default]
    Sine,
}

/// Guidance scale per step: `γ_t = σ_t` (linear) or
/// `γ_t = σ_t + γ·σ_T·sin(πt/T)` (sine).
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSchedule {
    base: Vec<f64>,
    gamma: f64,
    mode: ScheduleMode,
}

impl GuidanceSchedule {
    /// `base` holds `σ_t` for `t = 0..=T`.
    pub fn new(base: Vec<f64>, gamma: f64, mode: ScheduleMode) -> Result<Self> {
        if base.len() < 2 {
            return Err(invalid("guidance schedule needs at least one step"));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("sine amplitude must be >= 0, got {gamma}")));
        }
        if base.iter().any(|b| !b.is_finite()) {
            return Err(invalid("guidance base scale must be finite"));
        }
        Ok(Self { base, gamma, mode })
    }

    /// `σ_t = scale · (reverse-process variance at t)`; `σ_0` repeats `σ_1`.
    pub fn from_noise_schedule(sched: &NoiseSchedule, scale: f64, gamma: f64, mode: ScheduleMode) -> Result<Self> {
        let steps = sched.steps();
        let base = (0..=steps).map(|t| scale * sched.variance(t.max(1))).collect();
        Self::new(base, gamma, mode)
    }

    /// Constant base `σ_t = scale` over `steps` steps (the EDM setting).
    pub fn constant(steps: usize, scale: f64, gamma: f64, mode: ScheduleMode) -> Result<Self> {
        Self::new(vec![scale; steps + 1], gamma, mode)
    }

    pub fn steps(&self) -> usize {
        self.base.len() - 1
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn base(&self, t: usize) -> f64 {
        self.base[t]
    }

    /// The sine term `γ·σ_T·sin(πt/T)`; exactly zero at both ends and
    /// exactly symmetric under `t ↦ T − t`.
    pub fn added_term(&self, t: usize) -> f64 {
        let steps = self.steps();
        if self.mode == ScheduleMode::Linear || t == 0 || t >= steps {
            return 0.0;
        }
        let folded = t.min(steps - t) as f64;
        self.gamma * self.base[steps] * (std::f64::consts::PI * folded / steps as f64).sin()
    }

    pub fn scale_at(&self, t: usize) -> Result<f64> {
        if t > self.steps() {
            return Err(invalid(format!("step {t} outside schedule range 0..={}", self.steps())));
        }
        Ok(match self.mode {
            ScheduleMode::Linear => self.base[t],
            ScheduleMode::Sine => self.base[t] + self.added_term(t),
        })
    }
}
