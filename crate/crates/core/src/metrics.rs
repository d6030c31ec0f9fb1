//! Sample-quality metrics against the known target: Bayes accuracy, the
//! Gaussian 2-Wasserstein distance on empirical moments, target
//! log-likelihood and mode coverage.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{empirical_moments, Gaussian, GaussianMixture};
use crate::samplers::RunRecord;

fn check_batch(samples: &[Vec<f64>], dim: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: s.len() });
    }
    Ok(())
}

/// Fraction of samples whose Bayes class under `truth` is `y`.
pub fn bayes_accuracy(samples: &[Vec<f64>], y: usize, truth: &GaussianMixture) -> Result<f64> {
    check_batch(samples, truth.dim())?;
    if y >= truth.num_classes() {
        return Err(invalid(format!("class {y} out of range for {} classes", truth.num_classes())));
    }
    let hits = samples.iter().filter(|x| truth.bayes_class(x) == y).count();
    Ok(hits as f64 / samples.len() as f64)
}

fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between two Gaussians given by moments:
/// `‖m₁−m₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₂^{½} Σ₁ Σ₂^{½})^{½})`.
pub fn gaussian_w2(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
    let root = sqrtm(c2);
    let cross = &root * c1 * &root;
    let eig = SymmetricEigen::new((&cross + cross.transpose()) * 0.5);
    let bures: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * bures;
    value.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentDistance {
    pub value: f64,
    /// The empirical covariance is singular (rank-deficient batch); the
    /// value is still the formula evaluated on it, without regularization.
    pub degenerate: bool,
}

/// Gaussian 2-Wasserstein distance between the batch's empirical moments
/// (unbiased covariance) and `component`.
pub fn moment_distance(samples: &[Vec<f64>], component: &Gaussian) -> Result<MomentDistance> {
    let d = component.dim();
    check_batch(samples, d)?;
    if samples.len() < d + 1 {
        return Err(invalid(format!("moment distance needs at least {} samples, got {}", d + 1, samples.len())));
    }
    let (m, c) = empirical_moments(samples);
    let eig = SymmetricEigen::new(c.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = max == 0.0 || min <= 1e-12 * max;
    let value = gaussian_w2(&m, &c, &DVector::from_column_slice(component.mean()), &component.cov_matrix());
    Ok(MomentDistance { value, degenerate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub class: usize,
    pub n: usize,
    /// Bayes accuracy with respect to `class`.
    pub accuracy: f64,
    pub moment_distance: f64,
    pub degenerate: bool,
    /// Mean `log N(x; μ_y, Σ_y)` over the batch.
    pub target_log_likelihood: f64,
    /// Fraction of samples assigned to each class by the Bayes rule.
    pub coverage: Vec<f64>,
}

pub fn quality_report(samples: &[Vec<f64>], y: usize, truth: &GaussianMixture) -> Result<QualityReport> {
    let accuracy = bayes_accuracy(samples, y, truth)?;
    let target = truth.component(y);
    let md = moment_distance(samples, target)?;
    let n = samples.len();
    let mut counts = vec![0usize; truth.num_classes()];
    for x in samples {
        counts[truth.bayes_class(x)] += 1;
    }
    Ok(QualityReport {
        class: y,
        n,
        accuracy,
        moment_distance: md.value,
        degenerate: md.degenerate,
        target_log_likelihood: samples.iter().map(|x| target.log_pdf(x)).sum::<f64>() / n as f64,
        coverage: counts.into_iter().map(|c| c as f64 / n as f64).collect(),
    })
}

/// Two quality reports and their differences `b − a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub a: QualityReport,
    pub b: QualityReport,
    pub delta_accuracy: f64,
    pub delta_moment_distance: f64,
    pub delta_log_likelihood: f64,
}

pub fn compare_runs(a: &RunRecord, b: &RunRecord, truth: &GaussianMixture, y: usize) -> Result<RunComparison> {
    let spec = truth.spec();
    if a.mixture != spec || b.mixture != spec {
        return Err(invalid("runs were drawn against a different mixture"));
    }
    if a.samples.len() != b.samples.len() {
        return Err(invalid(format!("runs have different batch sizes ({} vs {})", a.samples.len(), b.samples.len())));
    }
    let ra = quality_report(&a.samples, y, truth)?;
    let rb = quality_report(&b.samples, y, truth)?;
    Ok(RunComparison {
        delta_accuracy: rb.accuracy - ra.accuracy,
        delta_moment_distance: rb.moment_distance - ra.moment_distance,
        delta_log_likelihood: rb.target_log_likelihood - ra.target_log_likelihood,
        a: ra,
        b: rb,
    })
}
