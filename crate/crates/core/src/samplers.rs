//! Guided generation on top of analytic mixture denoisers: DDPM ancestral
//! sampling with classifier guidance, the EDM ODE sampler with Heun
//! correction and normalized guidance, and classifier-free guidance with
//! optional classifier-gradient injection.
//!
//! Chains run in fixed-size chunks. Chain `c` draws all of its randomness
//! from a ChaCha stream selected by `c` under the root seed, and per-step
//! statistics are reduced in chain order, so results do not depend on the
//! thread count.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{invalid, Error, Result};
use crate::guidance::{
    diagnostics, normalized_sample_direction, predicted_x0_from, GuidanceConfig, NoisePredictor, Normalization,
    StepInput,
};
use crate::mixture::{norm, GaussianMixture, MixtureSpec, NoiseLevel};
use crate::schedule::{EdmTimeGrid, GuidanceSchedule, NoiseSchedule};

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    Edm,
    Cfg,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Edm => "edm",
            SamplerKind::Cfg => "cfg",
        }
    }
}

/// Exact noise predictions for a Gaussian mixture under a VP schedule.
///
/// `ε(x, t) = −√(1−ᾱ_t)·∇log p_t(x)`, with `p_t` the full diffused mixture
/// (unconditional) or the diffused component of the requested class
/// (conditional).
#[derive(Debug, Clone)]
pub struct VpDenoiser {
    mixture: Arc<GaussianMixture>,
    schedule: NoiseSchedule,
    diffused: Vec<GaussianMixture>,
}

impl VpDenoiser {
    pub fn new(mixture: Arc<GaussianMixture>, schedule: NoiseSchedule) -> Result<Self> {
        let diffused = (1..=schedule.steps())
            .map(|t| mixture.diffuse(NoiseLevel::Vp { alpha_bar: schedule.alpha_bar(t) }).map(|d| d.into_mixture()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mixture, schedule, diffused })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// The diffused mixture at step `t ≥ 1`.
    pub fn diffused(&self, t: usize) -> &GaussianMixture {
        &self.diffused[t - 1]
    }

    pub fn noise(&self, x: &[f64], t: usize, class: Option<usize>) -> Vec<f64> {
        let m = self.diffused(t);
        let score = match class {
            Some(c) => m.component(c).natural_score(x),
            None => m.score_unchecked(x),
        };
        let s = -(1.0 - self.schedule.alpha_bar(t)).sqrt();
        score.into_iter().map(|v| s * v).collect()
    }

    /// `μ = (x_t − β_t/√(1−ᾱ_t)·ε) / √α_t`.
    pub fn mean(&self, x: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let coef = self.schedule.beta(t) / (1.0 - self.schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / self.schedule.alpha(t).sqrt();
        x.iter().zip(eps).map(|(xi, e)| inv * (xi - coef * e)).collect()
    }

    /// Noise estimate and reverse mean.
    pub fn predict(&self, x: &[f64], t: usize, class: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let eps = self.noise(x, t, class);
        let mean = self.mean(x, t, &eps);
        (eps, mean)
    }

    /// A [`NoisePredictor`] bound to one conditioning choice.
    pub fn bind(&self, class: Option<usize>) -> BoundDenoiser<'_> {
        BoundDenoiser { denoiser: self, class }
    }
}

pub struct BoundDenoiser<'a> {
    denoiser: &'a VpDenoiser,
    class: Option<usize>,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict_noise(&self, x: &[f64], t: usize) -> Vec<f64> {
        self.denoiser.noise(x, t, self.class)
    }
}

/// Exact EDM denoiser `D(x; σ) = x + σ²∇log p_σ(x)` on a time grid.
#[derive(Debug, Clone)]
pub struct VeDenoiser {
    grid: EdmTimeGrid,
    diffused: Vec<GaussianMixture>,
}

impl VeDenoiser {
    pub fn new(mixture: Arc<GaussianMixture>, grid: EdmTimeGrid) -> Result<Self> {
        let diffused = (0..grid.steps())
            .map(|i| mixture.diffuse(NoiseLevel::Ve { sigma: grid.level(i) }).map(|d| d.into_mixture()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grid, diffused })
    }

    pub fn grid(&self) -> &EdmTimeGrid {
        &self.grid
    }

    fn score(&self, x: &[f64], i: usize, class: Option<usize>) -> Vec<f64> {
        let m = &self.diffused[i];
        match class {
            Some(c) => m.component(c).natural_score(x),
            None => m.score_unchecked(x),
        }
    }

    pub fn denoise(&self, x: &[f64], i: usize, class: Option<usize>) -> Vec<f64> {
        let s2 = self.grid.level(i).powi(2);
        x.iter().zip(self.score(x, i, class)).map(|(v, s)| v + s2 * s).collect()
    }

    /// `dx/dσ = (x − D(x; σ)) / σ = −σ∇log p_σ(x)` at grid point `i`.
    pub fn derivative(&self, x: &[f64], i: usize, class: Option<usize>) -> Vec<f64> {
        let sigma = self.grid.level(i);
        self.score(x, i, class).into_iter().map(|s| -sigma * s).collect()
    }
}

/// Chain-independent sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    /// Class `y` the guidance (or CFG) targets.
    pub class: usize,
    /// Conditioning of the diffusion model itself: `None` is unconditional.
    pub denoiser_class: Option<usize>,
    pub batch: usize,
    pub seed: u64,
    /// Keep every chain's `x_t` and `x̂₀(t)` for calibration analysis.
    pub keep_states: bool,
}

/// Per-step statistics averaged over chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position in the trajectory, 0 for the first (noisiest) step.
    pub index: usize,
    /// Schedule index: DDPM `t`, or EDM reverse index `N − i`.
    pub t: usize,
    /// `ᾱ_t` for VP samplers, `σ_i` for EDM.
    pub level: f64,
    pub scale: f64,
    pub grad_norm: f64,
    pub confidence: f64,
    pub logit_margin: f64,
    pub sample_norm: f64,
}

/// Every chain's state and denoised estimate at every step, stored
/// step-major: `[step][chain][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub chains: usize,
    pub steps: usize,
    pub noisy: Vec<f64>,
    pub denoised: Vec<f64>,
}

impl Trajectory {
    pub fn noisy_at(&self, step: usize, chain: usize) -> &[f64] {
        let o = (step * self.chains + chain) * self.dim;
        &self.noisy[o..o + self.dim]
    }

    pub fn denoised_at(&self, step: usize, chain: usize) -> &[f64] {
        let o = (step * self.chains + chain) * self.dim;
        &self.denoised[o..o + self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub sampler: SamplerKind,
    pub seed: u64,
    pub class: usize,
    pub dim: usize,
    /// The target mixture the chains were drawn against.
    pub mixture: MixtureSpec,
    pub steps: Vec<StepRecord>,
    pub samples: Vec<Vec<f64>>,
    pub trajectory: Option<Trajectory>,
}

impl RunRecord {
    /// Mean raw classifier-gradient norm over the last `fraction` of steps.
    pub fn late_grad_norm(&self, fraction: f64) -> f64 {
        let n = self.steps.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.steps[n - k..];
        tail.iter().map(|s| s.grad_norm).sum::<f64>() / tail.len() as f64
    }
}

/// What one chain reports at one step.
#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    scale: f64,
    grad_norm: f64,
    confidence: f64,
    logit_margin: f64,
    sample_norm: f64,
}

struct ChunkOutput {
    samples: Vec<Vec<f64>>,
    sums: Vec<StepStats>,
    noisy: Vec<Vec<f64>>,
    denoised: Vec<Vec<f64>>,
}

/// Runs `spec.batch` chains of `chain` and assembles the record.
fn run_chains<F>(
    sampler: SamplerKind,
    spec: &SampleSpec,
    mixture: &GaussianMixture,
    step_meta: Vec<(usize, f64)>,
    chain: F,
) -> Result<RunRecord>
where
    F: Fn(&mut ChaCha8Rng, &mut dyn FnMut(usize, StepStats, &[f64], &[f64])) -> Result<Vec<f64>> + Sync,
{
    if spec.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let dim = mixture.dim();
    let n_steps = step_meta.len();
    let chunks: Vec<(usize, usize)> =
        (0..spec.batch).step_by(CHUNK).map(|start| (start, (start + CHUNK).min(spec.batch))).collect();
    let outputs = chunks
        .par_iter()
        .map(|&(start, end)| {
            let mut out = ChunkOutput {
                samples: Vec::with_capacity(end - start),
                sums: vec![StepStats::default(); n_steps],
                noisy: vec![Vec::new(); if spec.keep_states { n_steps } else { 0 }],
                denoised: vec![Vec::new(); if spec.keep_states { n_steps } else { 0 }],
            };
            for c in start..end {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(c as u64);
                let mut record = |k: usize, s: StepStats, x: &[f64], x0: &[f64]| {
                    let acc = &mut out.sums[k];
                    acc.scale += s.scale;
                    acc.grad_norm += s.grad_norm;
                    acc.confidence += s.confidence;
                    acc.logit_margin += s.logit_margin;
                    acc.sample_norm += s.sample_norm;
                    if spec.keep_states {
                        out.noisy[k].extend_from_slice(x);
                        out.denoised[k].extend_from_slice(x0);
                    }
                };
                let sample = chain(&mut rng, &mut record)?;
                out.samples.push(sample);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut totals = vec![StepStats::default(); n_steps];
    let mut samples = Vec::with_capacity(spec.batch);
    let mut trajectory = spec.keep_states.then(|| Trajectory {
        dim,
        chains: spec.batch,
        steps: n_steps,
        noisy: Vec::with_capacity(n_steps * spec.batch * dim),
        denoised: Vec::with_capacity(n_steps * spec.batch * dim),
    });
    for out in &outputs {
        for (t, s) in totals.iter_mut().zip(&out.sums) {
            t.scale += s.scale;
            t.grad_norm += s.grad_norm;
            t.confidence += s.confidence;
            t.logit_margin += s.logit_margin;
            t.sample_norm += s.sample_norm;
        }
    }
    if let Some(tr) = trajectory.as_mut() {
        for k in 0..n_steps {
            for out in &outputs {
                tr.noisy.extend_from_slice(&out.noisy[k]);
                tr.denoised.extend_from_slice(&out.denoised[k]);
            }
        }
    }
    for out in outputs {
        samples.extend(out.samples);
    }
    let n = spec.batch as f64;
    let steps = totals
        .iter()
        .zip(step_meta)
        .enumerate()
        .map(|(index, (s, (t, level)))| StepRecord {
            index,
            t,
            level,
            scale: s.scale / n,
            grad_norm: s.grad_norm / n,
            confidence: s.confidence / n,
            logit_margin: s.logit_margin / n,
            sample_norm: s.sample_norm / n,
        })
        .collect();
    Ok(RunRecord {
        sampler,
        seed: spec.seed,
        class: spec.class,
        dim,
        mixture: mixture.spec(),
        steps,
        samples,
        trajectory,
    })
}

fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn ensure_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { step, input_norm: norm(x) })
    }
}

fn check_spec(spec: &SampleSpec, k: usize) -> Result<()> {
    if spec.class >= k {
        return Err(invalid(format!("target class {} out of range for {k} classes", spec.class)));
    }
    if let Some(c) = spec.denoiser_class {
        if c >= k {
            return Err(invalid(format!("denoiser class {c} out of range for {k} classes")));
        }
    }
    Ok(())
}

fn check_classifier(clf: &dyn Classifier, m: &GaussianMixture) -> Result<()> {
    if clf.dim() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), got: clf.dim() });
    }
    Ok(())
}

/// Confidence diagnostics for unguided steps when a classifier is around.
fn probe(clf: Option<&Arc<dyn Classifier>>, x: &[f64]) -> (f64, f64) {
    match clf {
        Some(c) => {
            let d = diagnostics(&c.logits(x));
            (d.confidence, d.logit_margin)
        }
        None => (0.0, 0.0),
    }
}

/// DDPM ancestral sampling with classifier guidance added to the reverse mean:
/// `x_{t−1} ~ N(μ + γ_t g, σ_t²)`. The last step returns the mean without noise.
///
/// `probe_classifier`, when set, is evaluated for diagnostics on unguided runs.
pub fn ddpm_guided_sample(
    denoiser: &VpDenoiser,
    guidance: Option<&GuidanceConfig>,
    probe_classifier: Option<&Arc<dyn Classifier>>,
    spec: &SampleSpec,
) -> Result<RunRecord> {
    let mixture = denoiser.mixture();
    check_spec(spec, mixture.num_classes())?;
    if let Some(g) = guidance {
        g.validate()?;
        check_classifier(g.classifier.as_ref(), mixture)?;
        if g.normalization == Normalization::MatchCfgDelta {
            return Err(invalid("match_cfg_delta normalization only applies to the cfg sampler"));
        }
    }
    let sched = denoiser.schedule();
    let steps = sched.steps();
    let dim = mixture.dim();
    let meta = (1..=steps).rev().map(|t| (t, sched.alpha_bar(t))).collect();
    let bound = denoiser.bind(spec.denoiser_class);
    let probe_clf = guidance.map(|g| &g.classifier).or(probe_classifier);

    run_chains(SamplerKind::Ddpm, spec, mixture, meta, |rng, record| {
        let mut x = standard_normal(rng, dim);
        for (k, t) in (1..=steps).rev().enumerate() {
            let (eps, mut mean) = denoiser.predict(&x, t, spec.denoiser_class);
            let x0 = predicted_x0_from(&x, &eps, sched.alpha_bar(t));
            let stats = match guidance {
                Some(g) => {
                    let out = g.compute_guidance(
                        sched,
                        &StepInput { x_t: &x, eps: &eps, t, class: spec.class, cfg_delta_norm: None },
                        Some(&bound),
                    )?;
                    for (m, v) in mean.iter_mut().zip(&out.vector) {
                        *m += v;
                    }
                    StepStats {
                        scale: out.scale,
                        grad_norm: out.grad_norm,
                        confidence: out.confidence,
                        logit_margin: out.logit_margin,
                        sample_norm: norm(&x),
                    }
                }
                None => {
                    let (confidence, logit_margin) = probe(probe_clf, &x0);
                    StepStats { confidence, logit_margin, sample_norm: norm(&x), ..StepStats::default() }
                }
            };
            record(k, stats, &x, &x0);
            if t > 1 {
                let sigma = sched.sigma(t);
                let z = standard_normal(rng, dim);
                x = mean.iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
            } else {
                x = mean;
            }
            ensure_finite(&x, t)?;
        }
        Ok(x)
    })
}

/// Guidance settings for the EDM sampler: the classifier sees `x/‖x‖` and
/// its unit gradient is added with weight `γ_i`.
#[derive(Debug, Clone)]
pub struct EdmGuidance {
    pub classifier: Arc<dyn Classifier>,
    pub temps: crate::classifier::TemperedLogits,
    /// Indexed by the reverse index `N − i`.
    pub schedule: GuidanceSchedule,
}

/// Deterministic EDM sampler: Euler step along `dx/dσ`, normalized guidance,
/// then Heun correction unless the next level is zero. Chains start from
/// `σ_max · N(0, I)`.
pub fn edm_guided_sample(
    denoiser: &VeDenoiser,
    mixture: &GaussianMixture,
    guidance: Option<&EdmGuidance>,
    probe_classifier: Option<&Arc<dyn Classifier>>,
    spec: &SampleSpec,
) -> Result<RunRecord> {
    check_spec(spec, mixture.num_classes())?;
    let grid = denoiser.grid();
    let n = grid.steps();
    if let Some(g) = guidance {
        g.temps.validate()?;
        check_classifier(g.classifier.as_ref(), mixture)?;
        if g.schedule.steps() != n {
            return Err(invalid(format!("guidance schedule has {} steps, grid has {n}", g.schedule.steps())));
        }
    }
    let dim = mixture.dim();
    let meta = (0..n).map(|i| (n - i, grid.level(i))).collect();
    let probe_clf = guidance.map(|g| &g.classifier).or(probe_classifier);

    run_chains(SamplerKind::Edm, spec, mixture, meta, |rng, record| {
        let mut x: Vec<f64> = standard_normal(rng, dim).into_iter().map(|z| z * grid.sigma_max()).collect();
        for i in 0..n {
            let (t_cur, t_next) = (grid.level(i), grid.level(i + 1));
            let h = t_next - t_cur;
            let d = denoiser.derivative(&x, i, spec.denoiser_class);
            let mut next: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + h * di).collect();
            let x0 = denoiser.denoise(&x, i, spec.denoiser_class);
            let mut stats = StepStats { sample_norm: norm(&x), ..StepStats::default() };
            let mut shift: Option<Vec<f64>> = None;
            match guidance {
                Some(g) => {
                    let scale = g.schedule.scale_at(n - i)?;
                    stats.scale = scale;
                    if scale != 0.0 {
                        let (dir, gn, logits) =
                            normalized_sample_direction(g.classifier.as_ref(), &x, spec.class, g.temps, n - i)?;
                        let diag = diagnostics(&logits);
                        stats.grad_norm = gn;
                        stats.confidence = diag.confidence;
                        stats.logit_margin = diag.logit_margin;
                        let s: Vec<f64> = dir.iter().map(|v| scale * v).collect();
                        for (nx, v) in next.iter_mut().zip(&s) {
                            *nx += v;
                        }
                        shift = Some(s);
                    } else {
                        let (c, m) = probe(probe_clf, &x0);
                        stats.confidence = c;
                        stats.logit_margin = m;
                    }
                }
                None => {
                    let (c, m) = probe(probe_clf, &x0);
                    stats.confidence = c;
                    stats.logit_margin = m;
                }
            }
            if t_next != 0.0 {
                let d2 = denoiser.derivative(&next, i + 1, spec.denoiser_class);
                next = x.iter().zip(d.iter().zip(&d2)).map(|(xi, (a, b))| xi + h * (0.5 * a + 0.5 * b)).collect();
                if let Some(s) = &shift {
                    for (nx, v) in next.iter_mut().zip(s) {
                        *nx += v;
                    }
                }
            }
            record(i, stats, &x, &x0);
            x = next;
            ensure_finite(&x, n - i)?;
        }
        Ok(x)
    })
}

/// Classifier-free guidance: `ε* = ε_c + (s−1)(Δε − γ_t ḡ)` with
/// `Δε = ε_c − ε_∅` and `ḡ = g/‖g‖·‖Δε‖` when a classifier is injected
/// (`g` is a log-probability gradient, so it enters noise space with a
/// minus sign), otherwise `ε* = ε_c + (s−1)Δε`. Then one posterior-mean step.
///
/// The denoiser's conditioning is always `spec.class` here;
/// `spec.denoiser_class` is ignored.
pub fn cfg_sample(
    denoiser: &VpDenoiser,
    cfg_scale: f64,
    injection: Option<&GuidanceConfig>,
    spec: &SampleSpec,
) -> Result<RunRecord> {
    let mixture = denoiser.mixture();
    check_spec(spec, mixture.num_classes())?;
    if !(cfg_scale >= 1.0 && cfg_scale.is_finite()) {
        return Err(invalid(format!("classifier-free scale must be >= 1, got {cfg_scale}")));
    }
    if let Some(g) = injection {
        g.validate()?;
        check_classifier(g.classifier.as_ref(), mixture)?;
        if g.normalization != Normalization::MatchCfgDelta {
            return Err(invalid("classifier injection into CFG needs match_cfg_delta normalization"));
        }
    }
    let sched = denoiser.schedule();
    let steps = sched.steps();
    let dim = mixture.dim();
    let meta = (1..=steps).rev().map(|t| (t, sched.alpha_bar(t))).collect();
    let bound = denoiser.bind(Some(spec.class));
    let y = spec.class;

    run_chains(SamplerKind::Cfg, spec, mixture, meta, |rng, record| {
        let mut x = standard_normal(rng, dim);
        for (k, t) in (1..=steps).rev().enumerate() {
            let eps_c = denoiser.noise(&x, t, Some(y));
            let x0 = predicted_x0_from(&x, &eps_c, sched.alpha_bar(t));
            let mut stats = StepStats { sample_norm: norm(&x), ..StepStats::default() };
            let eps = if cfg_scale == 1.0 {
                if let Some(g) = injection {
                    let d = diagnostics(&g.classifier.logits(&x0));
                    stats.confidence = d.confidence;
                    stats.logit_margin = d.logit_margin;
                }
                eps_c
            } else {
                let eps_u = denoiser.noise(&x, t, None);
                let mut delta: Vec<f64> = eps_c.iter().zip(&eps_u).map(|(c, u)| c - u).collect();
                if let Some(g) = injection {
                    let out = g.compute_guidance(
                        sched,
                        &StepInput { x_t: &x, eps: &eps_c, t, class: y, cfg_delta_norm: Some(norm(&delta)) },
                        Some(&bound),
                    )?;
                    stats.scale = out.scale;
                    stats.grad_norm = out.grad_norm;
                    stats.confidence = out.confidence;
                    stats.logit_margin = out.logit_margin;
                    for (dv, gv) in delta.iter_mut().zip(&out.vector) {
                        *dv -= gv;
                    }
                }
                eps_c.iter().zip(&delta).map(|(c, dv)| c + (cfg_scale - 1.0) * dv).collect()
            };
            let mean = denoiser.mean(&x, t, &eps);
            record(k, stats, &x, &x0);
            if t > 1 {
                let sigma = sched.sigma(t);
                let z = standard_normal(rng, dim);
                x = mean.iter().zip(&z).map(|(m, zi)| m + sigma * zi).collect();
            } else {
                x = mean;
            }
            ensure_finite(&x, t)?;
        }
        Ok(x)
    })
}
