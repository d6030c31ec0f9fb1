//! Expected calibration error along reverse trajectories, reliability-diagram
//! data, and an empirical check that closer densities give closer scores.

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::error::{invalid, Error, Result};
use crate::guidance::GuidanceInput;
use crate::mixture::{argmax, softmax, Gaussian, GaussianMixture};
use crate::samplers::RunRecord;

pub const DEFAULT_BINS: usize = 10;

/// Fewest quadrature points per axis [`prop1_diagnostic`] accepts.
pub const MIN_QUADRATURE_POINTS: usize = 32;

/// One equal-width confidence bin `[m/M, (m+1)/M)`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Sum of confidences in the bin.
    pub confidence_sum: f64,
    pub correct: usize,
}

impl ReliabilityBin {
    /// Mean confidence, `NaN` for an empty bin.
    pub fn confidence(&self) -> f64 {
        self.confidence_sum / self.count as f64
    }

    /// Empirical accuracy, `NaN` for an empty bin.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

impl ReliabilityBins {
    /// `Σ_m (|B_m|/n)·|acc(B_m) − conf(B_m)|`.
    pub fn ece(&self) -> f64 {
        let n = self.total as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.accuracy() - b.confidence()).abs())
            .sum()
    }
}

/// Index of the equal-width bin containing `c`, consistent with the bin
/// edges `m/M` as floating-point values.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut i = ((c * m).floor().max(0.0) as usize).min(bins - 1);
    while i > 0 && c < i as f64 / m {
        i -= 1;
    }
    while i + 1 < bins && c >= (i + 1) as f64 / m {
        i += 1;
    }
    i
}

/// Expected calibration error with `bins` equal-width bins on `[0, 1]`.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if confidences.is_empty() {
        return Err(Error::Empty("confidences"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch { expected: confidences.len(), got: correct.len() });
    }
    if bins == 0 {
        return Err(invalid("bin count must be at least 1"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(invalid(format!("confidence {c} outside [0, 1]")));
    }
    let m = bins as f64;
    let mut out: Vec<ReliabilityBin> = (0..bins)
        .map(|i| ReliabilityBin {
            lower: i as f64 / m,
            upper: (i + 1) as f64 / m,
            count: 0,
            confidence_sum: 0.0,
            correct: 0,
        })
        .collect();
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = &mut out[bin_index(c, bins)];
        b.count += 1;
        b.confidence_sum += c;
        b.correct += ok as usize;
    }
    let rel = ReliabilityBins { bins: out, total: confidences.len() };
    Ok((rel.ece(), rel))
}

/// How a chain's true label is determined for trajectory calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// The class the run was conditioned on.
    #[default]
    ConditioningClass,
    /// The Bayes class of the chain's final sample under the true mixture.
    FinalBayesClass,
}

/// ECE at every recorded step and the step-mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// Schedule index per step, noisiest first.
    pub t: Vec<usize>,
    pub ece: Vec<f64>,
    pub reliability: Vec<ReliabilityBins>,
    pub integral: f64,
}

impl CalibrationCurve {
    /// Mean ECE over the first `fraction` of steps (the high-noise end).
    pub fn early_mean(&self, fraction: f64) -> f64 {
        let k = ((self.ece.len() as f64 * fraction).ceil() as usize).clamp(1, self.ece.len());
        self.ece[..k].iter().sum::<f64>() / k as f64
    }
}

/// Top-class confidence and correctness of `clf` on each point.
fn score_points<'a>(
    clf: &dyn Classifier,
    points: impl Iterator<Item = &'a [f64]>,
    labels: &[usize],
) -> (Vec<f64>, Vec<bool>) {
    points
        .zip(labels)
        .map(|(x, &y)| {
            let p = softmax(&clf.logits(x));
            let k = argmax(&p);
            (p[k], k == y)
        })
        .unzip()
}

/// ECE of `clf` on points with known labels.
pub fn ece_on_points(clf: &dyn Classifier, points: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: points.len(), got: labels.len() });
    }
    let (c, ok) = score_points(clf, points.iter().map(|p| p.as_slice()), labels);
    Ok(ece(&c, &ok, bins)?.0)
}

/// `ECE_t` of `clf` along the stored trajectory of `run`, on either the
/// noisy states or the predicted clean samples.
pub fn trajectory_ece(
    run: &RunRecord,
    clf: &dyn Classifier,
    truth: &GaussianMixture,
    input: GuidanceInput,
    labels: LabelRule,
    bins: usize,
) -> Result<CalibrationCurve> {
    if clf.dim() != truth.dim() {
        return Err(Error::DimensionMismatch { expected: truth.dim(), got: clf.dim() });
    }
    if run.dim != truth.dim() {
        return Err(Error::DimensionMismatch { expected: truth.dim(), got: run.dim });
    }
    let tr = run.trajectory.as_ref().ok_or_else(|| invalid("run has no stored states; sample with states kept"))?;
    if tr.steps == 0 || run.steps.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let y: Vec<usize> = match labels {
        LabelRule::ConditioningClass => vec![run.class; tr.chains],
        LabelRule::FinalBayesClass => run.samples.iter().map(|x| truth.bayes_class(x)).collect(),
    };
    let mut curve = CalibrationCurve { t: Vec::new(), ece: Vec::new(), reliability: Vec::new(), integral: 0.0 };
    for (k, rec) in run.steps.iter().enumerate() {
        let points = (0..tr.chains).map(|c| match input {
            GuidanceInput::NoisySample => tr.noisy_at(k, c),
            GuidanceInput::PredictedX0 => tr.denoised_at(k, c),
        });
        let (conf, ok) = score_points(clf, points, &y);
        let (e, rel) = ece(&conf, &ok, bins)?;
        curve.t.push(rec.t);
        curve.ece.push(e);
        curve.reliability.push(rel);
    }
    curve.integral = curve.ece.iter().sum::<f64>() / curve.ece.len() as f64;
    Ok(curve)
}

/// One row of [`prop1_diagnostic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub delta: f64,
    /// `‖p − p_δ‖_{L²(Ω)}`.
    pub density_l2: f64,
    /// `‖∇log p − ∇log p_δ‖_{L²(Ω)}`.
    pub score_l2: f64,
}

/// Compares `p` with the family `p_δ` whose component means are all shifted
/// by `δ·v` (`v` = `direction`, default the normalized all-ones vector).
/// Both L² norms use midpoint quadrature on the box spanning ±6 standard
/// deviations around every component of `p`.
pub fn prop1_diagnostic(
    p: &GaussianMixture,
    deltas: &[f64],
    points_per_axis: usize,
    direction: Option<&[f64]>,
) -> Result<Vec<PerturbationRow>> {
    let d = p.dim();
    if points_per_axis < MIN_QUADRATURE_POINTS {
        return Err(invalid(format!(
            "quadrature grid needs at least {MIN_QUADRATURE_POINTS} points per axis, got {points_per_axis}"
        )));
    }
    let total = (points_per_axis as f64).powi(d as i32);
    if total > 5e7 {
        return Err(invalid(format!("quadrature grid of {total:e} points is too large")));
    }
    if let Some(bad) = deltas.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!("perturbation scale must be non-negative, got {bad}")));
    }
    let v: Vec<f64> = match direction {
        Some(v) if v.len() != d => return Err(Error::DimensionMismatch { expected: d, got: v.len() }),
        Some(v) => {
            let n = crate::mixture::norm(v);
            if n == 0.0 {
                return Err(invalid("perturbation direction must be nonzero"));
            }
            v.iter().map(|x| x / n).collect()
        }
        None => vec![1.0 / (d as f64).sqrt(); d],
    };

    let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
    for g in p.components() {
        for i in 0..d {
            let sd = g.cov()[i * d + i].sqrt();
            lo[i] = lo[i].min(g.mean()[i] - 6.0 * sd);
            hi[i] = hi[i].max(g.mean()[i] + 6.0 * sd);
        }
    }
    let h: Vec<f64> = (0..d).map(|i| (hi[i] - lo[i]) / points_per_axis as f64).collect();
    let cell: f64 = h.iter().product();

    deltas
        .iter()
        .map(|&delta| {
            let shifted = p
                .components()
                .iter()
                .map(|g| {
                    let mean = g.mean().iter().zip(&v).map(|(m, vi)| m + delta * vi).collect();
                    Gaussian::new(mean, g.cov().to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            let q = GaussianMixture::from_components(p.weights().to_vec(), shifted)?;
            let (mut dens, mut score) = (0.0, 0.0);
            let mut idx = vec![0usize; d];
            let mut x = vec![0.0; d];
            loop {
                for i in 0..d {
                    x[i] = lo[i] + (idx[i] as f64 + 0.5) * h[i];
                }
                let diff = p.log_density(&x)?.exp() - q.log_density(&x)?.exp();
                dens += diff * diff;
                let (sp, sq) = (p.score(&x)?, q.score(&x)?);
                score += sp.iter().zip(&sq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                // odometer increment over the tensor grid
                let mut i = 0;
                while i < d {
                    idx[i] += 1;
                    if idx[i] < points_per_axis {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
                if i == d {
                    break;
                }
            }
            Ok(PerturbationRow { delta, density_l2: (dens * cell).sqrt(), score_l2: (score * cell).sqrt() })
        })
        .collect()
}
