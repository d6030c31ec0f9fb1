//! Self-verification suite run by `guidelab verify`: every check compares a
//! library result with an independently computed reference.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::{ece, prop1_diagnostic};
use crate::classifier::{Activation, Classifier, SmallNet};
use crate::config::default_mixture;
use crate::mixture::{GaussianMixture, JointGradForm, MixtureSpec, NoiseLevel};
use crate::samplers::{cfg_sample, ddpm_guided_sample, SampleSpec, VpDenoiser};
use crate::schedule::NoiseSchedule;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub tolerance: String,
    pub measured: String,
    pub passed: bool,
}

impl Check {
    fn within(name: &'static str, value: f64, tol: f64) -> Self {
        Check { name, tolerance: format!("< {tol:e}"), measured: format!("{value:.3e}"), passed: value < tol }
    }
}

/// Test hooks for negative controls.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hooks {
    /// Replace the first covariance of the benchmark with a non-SPD matrix.
    pub corrupt_covariance: bool,
}

/// Runs every check in a fixed order.
pub fn run_checks(hooks: Hooks) -> Vec<Check> {
    vec![
        covariance_check(hooks),
        conditional_grad_check(),
        conditional_identity_check(),
        eps_mu_check(),
        ece_check(),
        semigroup_check(),
        softplus_check(),
        cfg_check(),
        perturbation_check(),
    ]
}

/// Fixed-width report table, one line per check.
pub fn render(checks: &[Check]) -> String {
    let mut out = format!("{:<6} {:<28} {:<20} {}\n", "status", "check", "measured", "tolerance");
    for c in checks {
        out.push_str(&format!(
            "{:<6} {:<28} {:<20} {}\n",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        ));
    }
    out
}

/// A random mixture with `k ≤ 5` components in `d ≤ 4` dimensions and
/// covariances `AAᵀ + 0.3I`.
pub fn random_mixture<R: Rng>(rng: &mut R) -> GaussianMixture {
    let k = rng.random_range(1..=5);
    let d = rng.random_range(1..=4);
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let comps = (0..k)
        .map(|_| {
            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut cov = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] =
                        (0..d).map(|m| a[i * d + m] * a[j * d + m]).sum::<f64>() + if i == j { 0.3 } else { 0.0 };
                }
            }
            (mean, cov)
        })
        .collect();
    GaussianMixture::new(raw.iter().map(|w| w / total).collect(), comps).expect("valid random mixture")
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / ‖b‖`, with the denominator floored at `1e-12·magnitude` so
/// that a reference that is exactly zero (e.g. a one-component mixture) is
/// judged against the size of the terms that cancelled.
fn rel_err(a: &[f64], b: &[f64], magnitude: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    if diff == 0.0 {
        return 0.0;
    }
    diff / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12 * magnitude)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `P(l|x)` for finite differencing. For a dominant class the value is
/// `1 − Σ_{k≠l} P(k|x)` and only the sum is returned (negated, shifted by
/// one constant), so differences keep full relative precision.
fn stable_posterior(g: &GaussianMixture, x: &[f64], l: usize) -> f64 {
    let p = g.posterior(x).unwrap();
    if p[l] > 0.5 {
        -p.iter().enumerate().filter(|(k, _)| *k != l).map(|(_, v)| v).sum::<f64>()
    } else {
        p[l]
    }
}

fn covariance_check(hooks: Hooks) -> Check {
    let mut spec: MixtureSpec = default_mixture();
    if hooks.corrupt_covariance {
        spec.covariances[0] = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
    }
    match spec.build() {
        Ok(_) => Check { name: "covariance_spd", tolerance: "all SPD".into(), measured: "ok".into(), passed: true },
        Err(e) => Check { name: "covariance_spd", tolerance: "all SPD".into(), measured: e.to_string(), passed: false },
    }
}

fn conditional_grad_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let g = random_mixture(&mut rng);
        let (pts, _) = g.sample(&mut rng, 1);
        let x = &pts[0];
        for l in 0..g.num_classes() {
            let fd_post = central_diff(|p| stable_posterior(&g, p, l), x, 1e-5);
            let joint = g.joint_grad(x, l, JointGradForm::Log).unwrap();
            let m = norm(&joint);
            worst = worst.max(rel_err(&g.conditional_grad(x, l).unwrap(), &fd_post, m));
            let fd_joint = central_diff(|p| g.log_joints(p)[l], x, 1e-5);
            worst = worst.max(rel_err(&joint, &fd_joint, m));
        }
    }
    Check::within("conditional_grad_fd", worst, 1e-5)
}

fn conditional_identity_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let g = random_mixture(&mut rng);
        let (pts, _) = g.sample(&mut rng, 1);
        let x = &pts[0];
        let score = g.score(x).unwrap();
        let post = g.posterior(x).unwrap();
        let own: Vec<Vec<f64>> = g.components().iter().map(|c| c.natural_score(x)).collect();
        for l in 0..g.num_classes() {
            let joint = g.joint_grad(x, l, JointGradForm::Log).unwrap();
            let via_split: Vec<f64> = joint.iter().zip(&score).map(|(a, b)| a - b).collect();
            // responsibility-weighted differences of component scores
            let direct: Vec<f64> =
                (0..x.len()).map(|i| (0..g.num_classes()).map(|k| post[k] * (own[l][i] - own[k][i])).sum()).collect();
            // a difference of two gradients is resolved to roughly ε times
            // their size, so the error is taken relative to the operands
            let diff = via_split.iter().zip(&direct).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(diff / norm(&direct).max(norm(&joint)).max(norm(&score)));
        }
    }
    Check::within("joint_minus_marginal", worst, 1e-8)
}

fn eps_mu_check() -> Check {
    let g = Arc::new(default_mixture().build().expect("benchmark mixture"));
    let den = VpDenoiser::new(g, NoiseSchedule::scaled_linear(250).expect("schedule")).expect("denoiser");
    let s = den.schedule().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let t = rng.random_range(1..=250);
        let x = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)];
        let class = [None, Some(0), Some(1), Some(2)][rng.random_range(0..4)];
        let (eps, mu) = den.predict(&x, t, class);
        for i in 0..2 {
            let reference = (x[i] - s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt() * eps[i]) / s.alpha(t).sqrt();
            worst = worst.max((mu[i] - reference).abs());
        }
    }
    Check::within("eps_mu_identity", worst, 1e-10)
}

fn ece_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..500);
        let m = rng.random_range(1..=20);
        let conf: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ok: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let got = ece(&conf, &ok, m).expect("valid batch").0;
        let mut reference = 0.0;
        for b in 0..m {
            let (lo, hi) = (b as f64 / m as f64, (b + 1) as f64 / m as f64);
            let members: Vec<usize> =
                (0..n).filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == m - 1 && conf[i] <= hi))).collect();
            if members.is_empty() {
                continue;
            }
            let c = members.len() as f64;
            let acc = members.iter().filter(|&&i| ok[i]).count() as f64 / c;
            let mean = members.iter().map(|&i| conf[i]).sum::<f64>() / c;
            reference += c / n as f64 * (acc - mean).abs();
        }
        worst = worst.max((got - reference).abs());
    }
    Check::within("ece_brute_force", worst, 1e-12)
}

fn semigroup_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = random_mixture(&mut rng);
        let (a1, a2) = (rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
        let twice = g
            .diffuse(NoiseLevel::Vp { alpha_bar: a1 })
            .and_then(|d| d.into_mixture().diffuse(NoiseLevel::Vp { alpha_bar: a2 }))
            .expect("diffusion");
        let once = g.diffuse(NoiseLevel::Vp { alpha_bar: a1 * a2 }).expect("diffusion");
        let (s1, s2) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let ve_twice = g
            .diffuse(NoiseLevel::Ve { sigma: s1 })
            .and_then(|d| d.into_mixture().diffuse(NoiseLevel::Ve { sigma: s2 }))
            .expect("diffusion");
        let ve_once = g.diffuse(NoiseLevel::Ve { sigma: (s1 * s1 + s2 * s2).sqrt() }).expect("diffusion");
        for (x, y) in [(&twice, &once), (&ve_twice, &ve_once)] {
            for k in 0..g.num_classes() {
                let (cx, cy) = (x.component(k), y.component(k));
                for (u, v) in cx.mean().iter().zip(cy.mean()).chain(cx.cov().iter().zip(cy.cov())) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    Check::within("diffusion_semigroup", worst, 1e-10)
}

fn softplus_check() -> Check {
    let relu = SmallNet::init(&[2, 64, 64, 3], Activation::Relu, 106).expect("network");
    let smooth = relu.with_activation(Activation::Softplus { beta: 1e4 }).expect("network");
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        for (a, b) in relu.logits(&x).iter().zip(smooth.logits(&x)) {
            worst = worst.max((a - b).abs());
        }
    }
    Check::within("softplus_relu_limit", worst, 1e-3)
}

fn cfg_check() -> Check {
    let g = Arc::new(default_mixture().build().expect("benchmark mixture"));
    let den = VpDenoiser::new(g, NoiseSchedule::scaled_linear(50).expect("schedule")).expect("denoiser");
    let spec = SampleSpec { class: 1, denoiser_class: Some(1), batch: 256, seed: 107, keep_states: false };
    let cond = ddpm_guided_sample(&den, None, None, &spec).expect("sampling");
    let cfg = cfg_sample(&den, 1.0, None, &spec).expect("sampling");
    let same = cond.samples == cfg.samples;
    Check {
        name: "cfg_unit_scale_equivalence",
        tolerance: "bit-exact".into(),
        measured: if same { "identical".into() } else { "differs".into() },
        passed: same,
    }
}

fn perturbation_check() -> Check {
    let g = default_mixture().build().expect("benchmark mixture");
    let deltas = [0.4, 0.2, 0.1, 0.05];
    let coarse = prop1_diagnostic(&g, &deltas, 64, None).expect("quadrature");
    let fine = prop1_diagnostic(&g, &deltas, 128, None).expect("quadrature");
    let monotone = coarse.windows(2).all(|w| w[1].density_l2 < w[0].density_l2 && w[1].score_l2 < w[0].score_l2);
    let drift = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| {
            ((a.density_l2 - b.density_l2).abs() / b.density_l2).max((a.score_l2 - b.score_l2).abs() / b.score_l2)
        })
        .fold(0.0, f64::max);
    Check {
        name: "perturbation_refinement",
        tolerance: "strictly decreasing, refinement < 1e-2".into(),
        measured: format!("{} {drift:.3e}", if monotone { "decreasing" } else { "NOT-decreasing" }),
        passed: monotone && drift < 1e-2,
    }
}
