//! Gaussian-mixture analytics: densities, scores, class posteriors, the
//! closed-form joint and conditional class gradients, and forward-process
//! (noised) versions of a mixture.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedule::{EdmTimeGrid, NoiseSchedule};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Numerically stable `log Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax computed with the max-shift.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A single multivariate normal with cached precision, Cholesky factor and
/// log-determinant. Matrices are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
    precision: Vec<f64>,
    chol: Vec<f64>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        Self::build(mean, cov, 0)
    }

    fn build(mean: Vec<f64>, cov: Vec<f64>, component: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(invalid("zero-dimensional Gaussian"));
        }
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, got: cov.len() });
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(invalid(format!("component {component} has non-finite parameters")));
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-12 * scale {
                    return Err(Error::NotPositiveDefinite { component });
                }
            }
        }
        let m = DMatrix::from_row_slice(d, d, &cov);
        let chol = m.cholesky().ok_or(Error::NotPositiveDefinite { component })?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let inv = chol.inverse();
        let mut precision = vec![0.0; d * d];
        let mut lower = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                // symmetrize away round-off in the inverse
                precision[i * d + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                lower[i * d + j] = l[(i, j)];
            }
        }
        Ok(Self { mean, cov, precision, chol: lower, log_det })
    }

    /// Isotropic `N(mean, var·I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            cov[i * d + i] = var;
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major covariance.
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }

    /// `Σ^{-1}(μ − x)`, the gradient of `log N(x; μ, Σ)`.
    pub fn natural_score(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let diff: Vec<f64> = self.mean.iter().zip(x).map(|(m, v)| m - v).collect();
        (0..d)
            .map(|i| {
                let row = &self.precision[i * d..(i + 1) * d];
                row.iter().zip(&diff).map(|(p, v)| p * v).sum()
            })
            .collect()
    }

    /// Mahalanobis form `(x − μ)ᵀ Σ^{-1} (x − μ)`.
    pub fn mahalanobis(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let mut q = 0.0;
        for i in 0..d {
            let row = &self.precision[i * d..(i + 1) * d];
            q += diff[i] * row.iter().zip(&diff).map(|(p, v)| p * v).sum::<f64>();
        }
        q
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + self.mahalanobis(x))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d).map(|i| self.mean[i] + (0..=i).map(|j| self.chol[i * d + j] * z[j]).sum::<f64>()).collect()
    }

    /// The forward-process marginal `N(aμ, a²Σ + s²I)` for signal scale `a`
    /// and noise standard deviation `s`.
    fn noised(&self, signal: f64, noise_var: f64) -> Result<Self> {
        let d = self.dim();
        let mean = self.mean.iter().map(|m| signal * m).collect();
        let mut cov: Vec<f64> = self.cov.iter().map(|c| signal * signal * c).collect();
        for i in 0..d {
            cov[i * d + i] += noise_var;
        }
        Self::new(mean, cov)
    }
}

/// Noise level of a forward-process marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    /// Variance preserving: `x_t = √ᾱ x_0 + √(1−ᾱ) ε`.
    Vp { alpha_bar: f64 },
    /// Variance exploding (EDM): `x = x_0 + σ ε`.
    Ve { sigma: f64 },
}

/// Anything that maps a step index to a forward-process noise level.
pub trait NoiseLevels {
    fn noise_level(&self, t: usize) -> Result<NoiseLevel>;
}

impl NoiseLevels for NoiseSchedule {
    fn noise_level(&self, t: usize) -> Result<NoiseLevel> {
        if t > self.steps() {
            return Err(invalid(format!("step {t} outside 0..={}", self.steps())));
        }
        Ok(NoiseLevel::Vp { alpha_bar: self.alpha_bar(t) })
    }
}

impl NoiseLevels for EdmTimeGrid {
    fn noise_level(&self, i: usize) -> Result<NoiseLevel> {
        if i > self.steps() {
            return Err(invalid(format!("grid index {i} outside 0..={}", self.steps())));
        }
        Ok(NoiseLevel::Ve { sigma: self.level(i) })
    }
}

/// Which gradient [`GaussianMixture::joint_grad`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JointGradForm {
    /// `∇ log(b_l f_l(x)) = Σ_l^{-1}(μ_l − x)`.
    #[default]
    Log,
    /// `∇ (b_l f_l(x)) = b_l f_l(x) Σ_l^{-1}(μ_l − x)`.
    Exact,
}

/// Mixture specification as it appears in run config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// One `d × d` matrix per component, as nested rows.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl MixtureSpec {
    pub fn build(&self) -> Result<GaussianMixture> {
        if self.means.len() != self.weights.len() || self.covariances.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "mixture has {} weights, {} means and {} covariances",
                self.weights.len(),
                self.means.len(),
                self.covariances.len()
            )));
        }
        let components = self
            .means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| (m.clone(), c.iter().flatten().copied().collect()))
            .collect();
        GaussianMixture::new(self.weights.clone(), components)
    }
}

/// `f(x) = Σ_k b_k N(x; μ_k, Σ_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GaussianMixture {
    /// `components` are `(mean, row-major covariance)` pairs.
    pub fn new(weights: Vec<f64>, components: Vec<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let comps = components
            .into_iter()
            .enumerate()
            .map(|(k, (m, c))| Gaussian::build(m, c, k))
            .collect::<Result<Vec<_>>>()?;
        Self::from_components(weights, comps)
    }

    pub fn from_components(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("mixture needs at least one component"));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch { expected: components.len(), got: weights.len() });
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights sum to {total}, not 1")));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self { weights, log_weights, components })
    }

    pub fn num_classes(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn component(&self, k: usize) -> &Gaussian {
        &self.components[k]
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn spec(&self) -> MixtureSpec {
        let d = self.dim();
        MixtureSpec {
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean.clone()).collect(),
            covariances: self.components.iter().map(|c| c.cov.chunks(d).map(|r| r.to_vec()).collect()).collect(),
        }
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite input point"));
        }
        Ok(())
    }

    fn check_class(&self, l: usize) -> Result<()> {
        if l >= self.num_classes() {
            return Err(invalid(format!("class {l} out of range for {} components", self.num_classes())));
        }
        Ok(())
    }

    /// `log(b_k f_k(x))` for every component. These are the Bayes logits.
    pub fn log_joints(&self, x: &[f64]) -> Vec<f64> {
        self.components.iter().zip(&self.log_weights).map(|(c, lw)| lw + c.log_pdf(x)).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(log_sum_exp(&self.log_joints(x)))
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(softmax(&self.log_joints(x)))
    }

    /// `∇ log f(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.score_unchecked(x))
    }

    pub(crate) fn score_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let w = softmax(&self.log_joints(x));
        self.weighted_score(x, &w)
    }

    fn weighted_score(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (c, wk) in self.components.iter().zip(w) {
            if *wk == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(c.natural_score(x)) {
                *o += wk * s;
            }
        }
        out
    }

    /// Exact `∇_x P(Z = l | X = x) = P(l|x)·(Σ_l^{-1}(μ_l − x) − ∇ log f(x))`.
    pub fn conditional_grad(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_class(l)?;
        let w = softmax(&self.log_joints(x));
        Ok(self.responsibility_differences(x, l, &w).into_iter().map(|v| w[l] * v).collect())
    }

    /// `∇_x log P(Z = l | X = x)`, which stays finite where the posterior underflows.
    pub fn log_conditional_grad(&self, x: &[f64], l: usize) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_class(l)?;
        let w = softmax(&self.log_joints(x));
        Ok(self.responsibility_differences(x, l, &w))
    }

    /// `Σ_{k≠l} w_k (s_l − s_k)` with `s_k = Σ_k^{-1}(μ_k − x)`: equal to
    /// `s_l − Σ_k w_k s_k`, but without the cancellation that form suffers
    /// when `w_l ≈ 1`.
    fn responsibility_differences(&self, x: &[f64], l: usize, w: &[f64]) -> Vec<f64> {
        let sl = self.components[l].natural_score(x);
        let mut out = vec![0.0; x.len()];
        for (k, c) in self.components.iter().enumerate() {
            if k == l || w[k] == 0.0 {
                continue;
            }
            for (o, (a, b)) in out.iter_mut().zip(sl.iter().zip(c.natural_score(x))) {
                *o += w[k] * (a - b);
            }
        }
        out
    }

    /// Gradient of the joint `P(Z = l, X = x)`, in log or exact form.
    pub fn joint_grad(&self, x: &[f64], l: usize, form: JointGradForm) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.check_class(l)?;
        let s = self.components[l].natural_score(x);
        Ok(match form {
            JointGradForm::Log => s,
            JointGradForm::Exact => {
                let joint = (self.log_weights[l] + self.components[l].log_pdf(x)).exp();
                s.into_iter().map(|v| joint * v).collect()
            }
        })
    }

    /// `max_k ‖Σ_l^{-1}(μ_l − x) − Σ_k^{-1}(μ_k − x)‖`; with `P(l|x) ≥ 1 − ε` the
    /// log-conditional gradient norm is at most `ε` times this value.
    pub fn fading_bound(&self, x: &[f64], l: usize) -> Result<f64> {
        self.check_point(x)?;
        self.check_class(l)?;
        let sl = self.components[l].natural_score(x);
        Ok(self
            .components
            .iter()
            .map(|c| {
                let sk = c.natural_score(x);
                norm(&sl.iter().zip(&sk).map(|(a, b)| a - b).collect::<Vec<_>>())
            })
            .fold(0.0, f64::max))
    }

    /// Bayes decision: argmax of the posterior.
    pub fn bayes_class(&self, x: &[f64]) -> usize {
        argmax(&self.log_joints(x))
    }

    /// Draw `n` points with their generating component labels.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.num_classes() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            points.push(self.components[k].sample(rng));
            labels.push(k);
        }
        (points, labels)
    }

    /// The single-component mixture holding component `k`.
    pub fn only_component(&self, k: usize) -> Result<Self> {
        self.check_class(k)?;
        Self::from_components(vec![1.0], vec![self.components[k].clone()])
    }

    /// Closed-form forward-process marginal at the given noise level.
    pub fn diffuse(&self, level: NoiseLevel) -> Result<DiffusedMixture> {
        let (signal, noise_var) = match level {
            NoiseLevel::Vp { alpha_bar } => {
                if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
                    return Err(invalid(format!("alpha_bar {alpha_bar} outside (0, 1]")));
                }
                (alpha_bar.sqrt(), 1.0 - alpha_bar)
            }
            NoiseLevel::Ve { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(invalid(format!("noise level {sigma} must be >= 0")));
                }
                (1.0, sigma * sigma)
            }
        };
        let mixture = if signal == 1.0 && noise_var == 0.0 {
            self.clone()
        } else {
            let comps = self.components.iter().map(|c| c.noised(signal, noise_var)).collect::<Result<Vec<_>>>()?;
            Self::from_components(self.weights.clone(), comps)?
        };
        Ok(DiffusedMixture { mixture, level })
    }

    /// [`diffuse`](Self::diffuse) at step `t` of a DDPM schedule or EDM grid.
    pub fn diffuse_at<S: NoiseLevels + ?Sized>(&self, sched: &S, t: usize) -> Result<DiffusedMixture> {
        self.diffuse(sched.noise_level(t)?)
    }
}

/// A mixture pushed through the forward process; derefs to the noised
/// [`GaussianMixture`] so every mixture operation applies to it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedMixture {
    mixture: GaussianMixture,
    level: NoiseLevel,
}

impl DiffusedMixture {
    pub fn level(&self) -> NoiseLevel {
        self.level
    }

    pub fn into_mixture(self) -> GaussianMixture {
        self.mixture
    }
}

impl Deref for DiffusedMixture {
    type Target = GaussianMixture;

    fn deref(&self) -> &GaussianMixture {
        &self.mixture
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Empirical mean and unbiased covariance of a batch of points.
pub fn empirical_moments(points: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = points.first().map_or(0, Vec::len);
    let n = points.len() as f64;
    let mut mean = DVector::zeros(d);
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    if points.len() > 1 {
        cov /= n - 1.0;
    }
    (mean, cov)
}
