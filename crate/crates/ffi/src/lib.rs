//! C ABI over `guidelab`.
//!
//! Objects cross the boundary as opaque heap handles created by a `*_new`
//! function and released with the matching `*_free`. Every fallible call
//! returns a [`GlStatus`]; on failure a message is kept per thread and can be
//! read with [`gl_last_error`]. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use guidelab::classifier::{guidance_grad, BayesClassifier, Classifier, TemperedLogits};
use guidelab::config::{default_mixture, RunConfig};
use guidelab::experiment::Experiment;
use guidelab::metrics::quality_report;
use guidelab::mixture::GaussianMixture;
use guidelab::samplers::RunRecord;
use guidelab::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    Numeric = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
}

impl From<&Error> for GlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::Empty(_) => GlStatus::InvalidArgument,
            Error::DimensionMismatch { .. } => GlStatus::DimensionMismatch,
            Error::NotPositiveDefinite { .. } => GlStatus::NotPositiveDefinite,
            Error::NonFinite { .. } | Error::ZeroNorm { .. } | Error::Diverged { .. } => GlStatus::Numeric,
            Error::Config(_) | Error::Format { .. } => GlStatus::Config,
            Error::Io(_) => GlStatus::Io,
        }
    }
}

/// A Gaussian mixture with class labels.
pub struct GlMixture {
    inner: Arc<GaussianMixture>,
}

/// A logit provider used for guidance gradients.
pub struct GlClassifier {
    inner: Arc<dyn Classifier>,
}

/// A finished sampler run and the configuration that produced it.
pub struct GlRun {
    record: RunRecord,
    mixture: Arc<GaussianMixture>,
    class: usize,
}

/// Sample quality of a run against its target component.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GlQuality {
    pub accuracy: f64,
    pub moment_distance: f64,
    pub target_log_likelihood: f64,
    /// Nonzero when the sample covariance is singular.
    pub degenerate: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(GlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(GlStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GlStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(GlStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure, and turns panics into [`GlStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            GlStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn copy_into(dst: &mut [f64], src: &[f64]) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(Failure(
            GlStatus::DimensionMismatch,
            format!("output buffer holds {} values, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn gl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a mixture of `k` components in `d` dimensions. `means` holds
/// `k·d` values and `covs` holds `k` row-major `d×d` matrices.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_new(
    k: usize,
    d: usize,
    weights: *const f64,
    means: *const f64,
    covs: *const f64,
    out: *mut *mut GlMixture,
) -> GlStatus {
    guard(|| {
        if k == 0 || d == 0 {
            return Err(invalid("mixture needs at least one component and one dimension"));
        }
        let w = slice(weights, k, "weights")?;
        let m = slice(means, k * d, "means")?;
        let c = slice(covs, k * d * d, "covs")?;
        let comps = (0..k).map(|i| (m[i * d..(i + 1) * d].to_vec(), c[i * d * d..(i + 1) * d * d].to_vec())).collect();
        let mixture = GaussianMixture::new(w.to_vec(), comps)?;
        emit(out, GlMixture { inner: Arc::new(mixture) })
    })
}

/// The built-in three-class benchmark mixture in two dimensions.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_default(out: *mut *mut GlMixture) -> GlStatus {
    guard(|| emit(out, GlMixture { inner: Arc::new(default_mixture().build()?) }))
}

/// # Safety
/// `m` must come from a mixture constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_free(m: *mut GlMixture) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Dimension of the mixture, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_dim(m: *const GlMixture) -> usize {
    m.as_ref().map_or(0, |m| m.inner.dim())
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_num_classes(m: *const GlMixture) -> usize {
    m.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// `log p(x)`.
///
/// # Safety
/// `x` must hold `dim` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_log_density(m: *const GlMixture, x: *const f64, out: *mut f64) -> GlStatus {
    guard(|| {
        let m = handle(m, "mixture")?;
        let x = slice(x, m.inner.dim(), "x")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.log_density(x)?;
        Ok(())
    })
}

/// Class posterior `P(k|x)` for every class; `out` holds `num_classes` values.
///
/// # Safety
/// `x` must hold `dim` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_posterior(
    m: *const GlMixture,
    x: *const f64,
    out: *mut f64,
    out_len: usize,
) -> GlStatus {
    guard(|| {
        let m = handle(m, "mixture")?;
        let x = slice(x, m.inner.dim(), "x")?;
        copy_into(slice_mut(out, out_len, "out")?, &m.inner.posterior(x)?)
    })
}

/// Marginal score `∇ log p(x)`; `out` holds `dim` values.
///
/// # Safety
/// `x` must hold `dim` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_score(
    m: *const GlMixture,
    x: *const f64,
    out: *mut f64,
    out_len: usize,
) -> GlStatus {
    guard(|| {
        let m = handle(m, "mixture")?;
        let x = slice(x, m.inner.dim(), "x")?;
        copy_into(slice_mut(out, out_len, "out")?, &m.inner.score(x)?)
    })
}

/// `∇ log P(class|x)`; `out` holds `dim` values.
///
/// # Safety
/// `x` must hold `dim` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gl_mixture_log_conditional_grad(
    m: *const GlMixture,
    x: *const f64,
    class: usize,
    out: *mut f64,
    out_len: usize,
) -> GlStatus {
    guard(|| {
        let m = handle(m, "mixture")?;
        if class >= m.inner.num_classes() {
            return Err(invalid(format!("class {class} out of range for {} classes", m.inner.num_classes())));
        }
        let x = slice(x, m.inner.dim(), "x")?;
        copy_into(slice_mut(out, out_len, "out")?, &m.inner.log_conditional_grad(x, class)?)
    })
}

/// The exact Bayes classifier of a mixture. The classifier keeps its own
/// reference, so the mixture handle may be freed independently.
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_classifier_bayes(m: *const GlMixture, out: *mut *mut GlClassifier) -> GlStatus {
    guard(|| {
        let m = handle(m, "mixture")?;
        emit(out, GlClassifier { inner: Arc::new(BayesClassifier::new(m.inner.clone())) })
    })
}

/// # Safety
/// `c` must come from a classifier constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_classifier_free(c: *mut GlClassifier) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Logits at `x`; `out` holds `num_classes` values.
///
/// # Safety
/// `x` must hold the classifier's input dimension and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn gl_classifier_logits(
    c: *const GlClassifier,
    x: *const f64,
    out: *mut f64,
    out_len: usize,
) -> GlStatus {
    guard(|| {
        let c = handle(c, "classifier")?;
        let x = slice(x, c.inner.dim(), "x")?;
        copy_into(slice_mut(out, out_len, "out")?, &c.inner.logits(x))
    })
}

/// Gradient of `τ₁ f_y(x) − log Σ_i exp(τ₂ f_i(x))` with respect to `x`.
///
/// # Safety
/// `x` must hold the classifier's input dimension and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn gl_guidance_grad(
    c: *const GlClassifier,
    x: *const f64,
    class: usize,
    tau1: f64,
    tau2: f64,
    out: *mut f64,
    out_len: usize,
) -> GlStatus {
    guard(|| {
        let c = handle(c, "classifier")?;
        let x = slice(x, c.inner.dim(), "x")?;
        let temps = TemperedLogits::new(tau1, tau2)?;
        copy_into(slice_mut(out, out_len, "out")?, &guidance_grad(c.inner.as_ref(), x, class, temps)?)
    })
}

/// Builds the run described by a TOML configuration (the format accepted
/// by the command-line tool; empty for all defaults) and samples it.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gl_run_new(config_toml: *const c_char, out: *mut *mut GlRun) -> GlStatus {
    guard(|| {
        if config_toml.is_null() {
            return Err(null("config_toml"));
        }
        let text = CStr::from_ptr(config_toml)
            .to_str()
            .map_err(|_| Failure(GlStatus::Config, "configuration is not valid UTF-8".into()))?;
        let config = RunConfig::from_toml(text)?;
        let exp = Experiment::build(config)?;
        let record = exp.run(false)?;
        emit(out, GlRun { record, mixture: exp.mixture.clone(), class: exp.config.class })
    })
}

/// # Safety
/// `r` must come from [`gl_run_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gl_run_free(r: *mut GlRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_run_num_samples(r: *const GlRun) -> usize {
    r.as_ref().map_or(0, |r| r.record.samples.len())
}

/// Sample dimension, or 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_run_dim(r: *const GlRun) -> usize {
    r.as_ref().map_or(0, |r| r.record.dim)
}

/// Number of sampler steps, or 0 for a null handle.
///
/// # Safety
/// `r` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gl_run_num_steps(r: *const GlRun) -> usize {
    r.as_ref().map_or(0, |r| r.record.steps.len())
}

/// Copies the samples row-major into `out` (`num_samples · dim` values).
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gl_run_samples(r: *const GlRun, out: *mut f64, out_len: usize) -> GlStatus {
    guard(|| {
        let r = handle(r, "run")?;
        let flat: Vec<f64> = r.record.samples.iter().flatten().copied().collect();
        copy_into(slice_mut(out, out_len, "out")?, &flat)
    })
}

/// Mean raw classifier-gradient norm per step, noisiest step first.
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn gl_run_grad_norms(r: *const GlRun, out: *mut f64, out_len: usize) -> GlStatus {
    guard(|| {
        let r = handle(r, "run")?;
        let norms: Vec<f64> = r.record.steps.iter().map(|s| s.grad_norm).collect();
        copy_into(slice_mut(out, out_len, "out")?, &norms)
    })
}

/// Quality of the samples against the run's target class.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gl_run_quality(r: *const GlRun, out: *mut GlQuality) -> GlStatus {
    guard(|| {
        let r = handle(r, "run")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = quality_report(&r.record.samples, r.class, &r.mixture)?;
        *out = GlQuality {
            accuracy: q.accuracy,
            moment_distance: q.moment_distance,
            target_log_likelihood: q.target_log_likelihood,
            degenerate: q.degenerate as i32,
        };
        Ok(())
    })
}
