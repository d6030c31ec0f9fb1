//! Turns a [`RunConfig`] into a sampler run and its on-disk record.
//!
//! A run directory holds:
//!
//! | file | columns |
//! |---|---|
//! | `meta.toml` | the effective [`RunConfig`] (seed included) |
//! | `trajectory.csv` | `index,t,level,scale,grad_norm,confidence,logit_margin,sample_norm` |
//! | `samples.csv` | `x0,…,x{d-1},class` (Bayes class under the target mixture) |
//! | `calibration.csv` | `index,t,ece_predicted_x0,ece_noisy_sample` |
//! | `reliability_t<k>.csv` | `bin,lower,upper,count,confidence,accuracy` |
//! | `quality.csv` | `class,n,accuracy,moment_distance,degenerate,target_log_likelihood,integral_ece,late_grad_norm,coverage_0,…` |
//!
//! Every file is produced once per run and written atomically.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::{trajectory_ece, CalibrationCurve};
use crate::classifier::{Activation, BayesClassifier, Classifier, LabeledData, SmallNet, TemperedLogits};
use crate::config::{ClassifierKind, Conditioning, Resolved, RunConfig};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceInput};
use crate::io::{csv, write_atomic, StagedDir};
use crate::metrics::{quality_report, QualityReport};
use crate::mixture::GaussianMixture;
use crate::samplers::{
    cfg_sample, ddpm_guided_sample, edm_guided_sample, EdmGuidance, RunRecord, SampleSpec, SamplerKind, VeDenoiser,
    VpDenoiser,
};
use crate::schedule::{EdmTimeGrid, GuidanceSchedule, NoiseSchedule};

/// Fraction of trailing steps used for the late gradient-norm statistic.
pub const LATE_FRACTION: f64 = 0.2;

/// Number of steps that get a reliability-diagram file.
pub const RELIABILITY_SNAPSHOTS: usize = 5;

/// Built runtime objects for one configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub resolved: Resolved,
    pub mixture: Arc<GaussianMixture>,
    pub classifier: Arc<dyn Classifier>,
    /// The network before guidance-time smoothing, kept so variants of the
    /// configuration can reuse it without retraining.
    base_net: Option<SmallNet>,
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidParameter(m) => Error::Config(m),
        Error::NotPositiveDefinite { component } => {
            Error::Config(format!("covariance of component {component} is not symmetric positive definite"))
        }
        Error::DimensionMismatch { expected, got } => {
            Error::Config(format!("dimension mismatch: expected {expected}, got {got}"))
        }
        other => other,
    }
}

impl Experiment {
    pub fn build(config: RunConfig) -> Result<Self> {
        Self::build_with(config, None)
    }

    /// Same classifier network as `self` (if any), new configuration.
    pub fn rebuild(&self, config: RunConfig) -> Result<Self> {
        let same_source =
            config.mixture == self.config.mixture && config.classifier.kind == self.config.classifier.kind;
        Self::build_with(config, if same_source { self.base_net.clone() } else { None })
    }

    fn build_with(config: RunConfig, base_net: Option<SmallNet>) -> Result<Self> {
        config.validate()?;
        let resolved = config.resolved();
        let mixture = Arc::new(config.mixture.build().map_err(config_error)?);
        let (classifier, base_net): (Arc<dyn Classifier>, Option<SmallNet>) = match config.classifier.kind {
            ClassifierKind::Bayes => (Arc::new(BayesClassifier::new(mixture.clone())), None),
            ClassifierKind::Smallnet => {
                let net = match base_net {
                    Some(net) => net,
                    None => Self::load_or_train(&config, &mixture)?,
                };
                if net.sizes().first() != Some(&mixture.dim()) || net.sizes().last() != Some(&mixture.num_classes()) {
                    return Err(Error::Config(format!(
                        "classifier layer sizes {:?} do not fit a {}-class mixture in {} dimensions",
                        net.sizes(),
                        mixture.num_classes(),
                        mixture.dim()
                    )));
                }
                let used = if config.classifier.relu {
                    net.with_activation(Activation::Relu)?
                } else {
                    net.with_activation(Activation::Softplus { beta: resolved.softplus_beta })?
                };
                (Arc::new(used), Some(net))
            }
        };
        Ok(Self { config, resolved, mixture, classifier, base_net })
    }

    fn load_or_train(config: &RunConfig, mixture: &GaussianMixture) -> Result<SmallNet> {
        let c = &config.classifier;
        if let Some(path) = &c.path {
            return SmallNet::load(path);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.train.seed);
        let (points, labels) = mixture.sample(&mut rng, c.train_samples);
        let mut sizes = vec![mixture.dim()];
        sizes.extend(&c.hidden);
        sizes.push(mixture.num_classes());
        let mut net = SmallNet::init(&sizes, Activation::Relu, c.train.seed)?;
        net.train(&LabeledData { points, labels }, &c.train)?;
        Ok(net)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.config.schedule;
        let sched = match (s.beta_start, s.beta_end) {
            (None, None) => NoiseSchedule::scaled_linear(s.steps),
            (start, end) => {
                let defaults = NoiseSchedule::scaled_linear(s.steps).map_err(config_error)?;
                NoiseSchedule::linear(s.steps, start.unwrap_or(defaults.beta(1)), end.unwrap_or(defaults.beta(s.steps)))
            }
        }
        .map_err(config_error)?;
        Ok(sched.with_variance(s.posterior_variance))
    }

    pub fn edm_grid(&self) -> Result<EdmTimeGrid> {
        let e = &self.config.edm;
        EdmTimeGrid::new(e.steps, e.sigma_min, e.sigma_max, e.rho).map_err(config_error)
    }

    pub fn temps(&self) -> Result<TemperedLogits> {
        TemperedLogits::new(self.resolved.tau1, self.resolved.tau2).map_err(config_error)
    }

    /// The scale schedule the configured sampler uses.
    pub fn guidance_schedule(&self) -> Result<GuidanceSchedule> {
        let g = &self.config.guidance;
        let r = &self.resolved;
        match self.config.sampler {
            SamplerKind::Ddpm => {
                GuidanceSchedule::from_noise_schedule(&self.noise_schedule()?, r.scale, r.sine_gamma, g.schedule)
            }
            SamplerKind::Edm => GuidanceSchedule::constant(self.config.edm.steps, r.scale, r.sine_gamma, g.schedule),
            SamplerKind::Cfg => {
                GuidanceSchedule::constant(self.config.schedule.steps, r.scale, r.sine_gamma, g.schedule)
            }
        }
        .map_err(config_error)
    }

    fn guidance_config(&self) -> Result<GuidanceConfig> {
        let g = &self.config.guidance;
        Ok(GuidanceConfig {
            input: g.input,
            temps: self.temps()?,
            schedule: self.guidance_schedule()?,
            normalization: self.resolved.normalization,
            recurrence: g.recurrence,
            chain_rule: g.chain_rule,
            classifier: self.classifier.clone(),
        })
    }

    pub fn sample_spec(&self, keep_states: bool) -> SampleSpec {
        SampleSpec {
            class: self.config.class,
            denoiser_class: match self.config.conditioning {
                Conditioning::Unconditional => None,
                Conditioning::Conditional => Some(self.config.class),
            },
            batch: self.config.batch,
            seed: self.config.seed,
            keep_states,
        }
    }

    /// Runs the configured sampler.
    pub fn run(&self, keep_states: bool) -> Result<RunRecord> {
        let spec = self.sample_spec(keep_states);
        let guided = self.config.guidance.enabled;
        match self.config.sampler {
            SamplerKind::Ddpm => {
                let den = VpDenoiser::new(self.mixture.clone(), self.noise_schedule()?)?;
                let cfg = if guided { Some(self.guidance_config()?) } else { None };
                ddpm_guided_sample(&den, cfg.as_ref(), Some(&self.classifier), &spec)
            }
            SamplerKind::Edm => {
                let den = VeDenoiser::new(self.mixture.clone(), self.edm_grid()?)?;
                let g = if guided {
                    Some(EdmGuidance {
                        classifier: self.classifier.clone(),
                        temps: self.temps()?,
                        schedule: self.guidance_schedule()?,
                    })
                } else {
                    None
                };
                edm_guided_sample(&den, &self.mixture, g.as_ref(), Some(&self.classifier), &spec)
            }
            SamplerKind::Cfg => {
                let den = VpDenoiser::new(self.mixture.clone(), self.noise_schedule()?)?;
                let inject = if guided && self.config.cfg.inject { Some(self.guidance_config()?) } else { None };
                cfg_sample(&den, self.config.cfg.scale, inject.as_ref(), &spec)
            }
        }
    }

    /// Calibration of the configured classifier along `run` for one input.
    pub fn calibration(&self, run: &RunRecord, input: GuidanceInput) -> Result<CalibrationCurve> {
        let c = &self.config.calibration;
        trajectory_ece(run, self.classifier.as_ref(), &self.mixture, input, c.labels, c.bins)
    }
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub quality: QualityReport,
    /// Step-mean ECE on the configured guidance input.
    pub integral_ece: f64,
    pub late_grad_norm: f64,
}

impl Summary {
    pub fn line(&self) -> String {
        format!(
            "accuracy={:.4} moment_distance={:.6} integral_ece={:.4} late_grad_norm={:.4}",
            self.quality.accuracy, self.quality.moment_distance, self.integral_ece, self.late_grad_norm
        )
    }
}

/// Everything derived from a run that ends up on disk.
pub struct RunArtifacts {
    pub summary: Summary,
    pub files: Vec<(String, String)>,
}

fn f(v: f64) -> String {
    format!("{v}")
}

/// Steps that get reliability files: evenly spaced, first and last included.
pub fn snapshot_steps(steps: usize) -> Vec<usize> {
    let k = RELIABILITY_SNAPSHOTS.min(steps);
    if k <= 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..k).map(|i| (i * (steps - 1) + (k - 1) / 2) / (k - 1)).collect();
    v.dedup();
    v
}

pub fn trajectory_csv(run: &RunRecord) -> String {
    csv(
        &["index", "t", "level", "scale", "grad_norm", "confidence", "logit_margin", "sample_norm"],
        run.steps.iter().map(|s| {
            vec![
                s.index.to_string(),
                s.t.to_string(),
                f(s.level),
                f(s.scale),
                f(s.grad_norm),
                f(s.confidence),
                f(s.logit_margin),
                f(s.sample_norm),
            ]
        }),
    )
}

pub fn samples_csv(run: &RunRecord, truth: &GaussianMixture) -> String {
    let mut header: Vec<String> = (0..run.dim).map(|i| format!("x{i}")).collect();
    header.push("class".into());
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    csv(
        &h,
        run.samples.iter().map(|x| {
            let mut row: Vec<String> = x.iter().map(|v| f(*v)).collect();
            row.push(truth.bayes_class(x).to_string());
            row
        }),
    )
}

/// `calibration.csv` and the reliability snapshots.
pub fn calibration_files(exp: &Experiment, run: &RunRecord) -> Result<(Vec<(String, String)>, f64)> {
    let x0 = exp.calibration(run, GuidanceInput::PredictedX0)?;
    let xt = exp.calibration(run, GuidanceInput::NoisySample)?;
    let mut files = vec![(
        "calibration.csv".to_string(),
        csv(
            &["index", "t", "ece_predicted_x0", "ece_noisy_sample"],
            (0..x0.ece.len()).map(|k| vec![k.to_string(), x0.t[k].to_string(), f(x0.ece[k]), f(xt.ece[k])]),
        ),
    )];
    let chosen = match exp.config.guidance.input {
        GuidanceInput::PredictedX0 => &x0,
        GuidanceInput::NoisySample => &xt,
    };
    for k in snapshot_steps(chosen.ece.len()) {
        let rel = &chosen.reliability[k];
        files.push((
            format!("reliability_t{}.csv", chosen.t[k]),
            csv(
                &["bin", "lower", "upper", "count", "confidence", "accuracy"],
                rel.bins.iter().enumerate().map(|(i, b)| {
                    vec![i.to_string(), f(b.lower), f(b.upper), b.count.to_string(), f(b.confidence()), f(b.accuracy())]
                }),
            ),
        ));
    }
    Ok((files, chosen.integral))
}

pub fn quality_csv(summary: &Summary) -> String {
    let q = &summary.quality;
    let mut header: Vec<String> = [
        "class",
        "n",
        "accuracy",
        "moment_distance",
        "degenerate",
        "target_log_likelihood",
        "integral_ece",
        "late_grad_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..q.coverage.len()).map(|k| format!("coverage_{k}")));
    let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut row = vec![
        q.class.to_string(),
        q.n.to_string(),
        f(q.accuracy),
        f(q.moment_distance),
        (q.degenerate as u8).to_string(),
        f(q.target_log_likelihood),
        f(summary.integral_ece),
        f(summary.late_grad_norm),
    ];
    row.extend(q.coverage.iter().map(|c| f(*c)));
    csv(&h, [row])
}

/// The effective configuration as stored in `meta.toml`.
pub fn meta_toml(config: &RunConfig) -> String {
    let mut c = config.clone();
    c.out = None;
    format!("# guidelab run metadata: replaying this file reproduces the run\n{}", c.to_toml())
}

/// Runs the experiment and renders every output file.
pub fn execute(exp: &Experiment) -> Result<RunArtifacts> {
    let run = exp.run(true)?;
    let (cal_files, integral_ece) = calibration_files(exp, &run)?;
    let summary = Summary {
        quality: quality_report(&run.samples, exp.config.class, &exp.mixture)?,
        integral_ece,
        late_grad_norm: run.late_grad_norm(LATE_FRACTION),
    };
    let mut files = vec![
        ("meta.toml".to_string(), meta_toml(&exp.config)),
        ("trajectory.csv".to_string(), trajectory_csv(&run)),
        ("samples.csv".to_string(), samples_csv(&run, &exp.mixture)),
    ];
    files.extend(cal_files);
    files.push(("quality.csv".to_string(), quality_csv(&summary)));
    Ok(RunArtifacts { summary, files })
}

/// Refuses to replace a directory that does not look like a run directory.
pub fn check_replaceable(out: &Path) -> Result<()> {
    if out.exists() {
        let is_dir = out.is_dir();
        let empty = is_dir && std::fs::read_dir(out)?.next().is_none();
        let is_run = ["meta.toml", "sweep.csv", "ece_curve.csv"].iter().any(|m| out.join(m).exists());
        if !is_dir || !(empty || is_run) {
            return Err(Error::Config(format!(
                "{} exists and is not a previous output directory; refusing to overwrite",
                out.display()
            )));
        }
    }
    Ok(())
}

/// Writes `files` into `out` through a staging directory.
pub fn write_dir(out: &Path, files: &[(String, String)]) -> Result<()> {
    check_replaceable(out)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let staged = StagedDir::new(out)?;
    for (name, body) in files {
        write_atomic(&staged.file(name), body.as_bytes())?;
    }
    staged.commit()
}

/// Axes `sweep` accepts.
pub const SWEEP_AXES: &[&str] = &["tau1", "tau2", "gamma", "scale", "softplus_beta", "recurrence", "input", "bins"];

/// Sets `axis` to `value` in `config`.
pub fn apply_axis(config: &mut RunConfig, axis: &str, value: &str) -> Result<()> {
    let num = || {
        value
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("sweep value {value:?} is not a number for axis {axis}")))
    };
    let int = || {
        value
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("sweep value {value:?} is not an integer for axis {axis}")))
    };
    match axis {
        "tau1" => config.guidance.tau1 = Some(num()?),
        "tau2" => config.guidance.tau2 = Some(num()?),
        "gamma" => config.guidance.sine_gamma = Some(num()?),
        "scale" => config.guidance.scale = Some(num()?),
        "softplus_beta" => config.classifier.softplus_beta = Some(num()?),
        "recurrence" => config.guidance.recurrence = int()?,
        "bins" => config.calibration.bins = int()?,
        "input" => {
            config.guidance.input = match value {
                "predicted_x0" => GuidanceInput::PredictedX0,
                "noisy_sample" => GuidanceInput::NoisySample,
                _ => return Err(Error::Config(format!("input must be predicted_x0 or noisy_sample, got {value:?}"))),
            }
        }
        _ => return Err(Error::Config(format!("unknown sweep axis {axis:?}; valid axes: {}", SWEEP_AXES.join(", ")))),
    }
    config.validate()
}

/// Paired-seed runs over `values` of `axis`; returns the `sweep.csv` text.
pub fn sweep(base: &Experiment, axis: &str, values: &[String]) -> Result<String> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut c = base.config.clone();
            apply_axis(&mut c, axis, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, config) in values.iter().zip(configs) {
        let exp = base.rebuild(config)?;
        let art = execute(&exp)?;
        let q = &art.summary.quality;
        rows.push(vec![
            axis.to_string(),
            value.clone(),
            exp.config.seed.to_string(),
            f(q.accuracy),
            f(q.moment_distance),
            f(q.target_log_likelihood),
            f(art.summary.integral_ece),
            f(art.summary.late_grad_norm),
        ]);
    }
    Ok(csv(
        &[
            "axis",
            "value",
            "seed",
            "accuracy",
            "moment_distance",
            "target_log_likelihood",
            "integral_ece",
            "late_grad_norm",
        ],
        rows,
    ))
}
