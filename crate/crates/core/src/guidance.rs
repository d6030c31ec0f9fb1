//! Per-step guidance vectors: classifier input selection, the τ₁/τ₂
//! temperature split, normalization, scale scheduling and recurrent
//! application.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::{guidance_grad_with_logits, Classifier, TemperedLogits};
use crate::error::{invalid, Error, Result};
use crate::mixture::{norm, softmax};
use crate::schedule::{GuidanceSchedule, NoiseSchedule};

/// Which point the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceInput {
    /// The reverse-process sample `x_t`.
    NoisySample,
    /// The one-shot denoised estimate `x̂₀(t)`.
    #[default]
    PredictedX0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    /// `g / ‖g‖`.
    UnitGradient,
    /// `g / ‖g‖ · ‖Δε‖`, with `Δε` the conditional minus unconditional noise.
    MatchCfgDelta,
}

/// Noise prediction at an arbitrary state, used to re-derive `x̂₀` during
/// recurrent guidance.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &[f64], t: usize) -> Vec<f64>;
}

/// A differentiable latent-to-input map.
pub trait Decoder: Sync {
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn decode(&self, z: &[f64]) -> Vec<f64>;
    /// `J(z)ᵀ v`.
    fn pullback(&self, z: &[f64], v: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityDecoder {
    pub dim: usize,
}

impl Decoder for IdentityDecoder {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn decode(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }

    fn pullback(&self, _z: &[f64], v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

/// `z ↦ A z` with `A` stored row-major, `outputs × inputs`.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    inputs: usize,
    outputs: usize,
    matrix: Vec<f64>,
}

impl LinearDecoder {
    pub fn new(outputs: usize, inputs: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != outputs * inputs {
            return Err(Error::DimensionMismatch { expected: outputs * inputs, got: matrix.len() });
        }
        Ok(Self { inputs, outputs, matrix })
    }
}

impl Decoder for LinearDecoder {
    fn latent_dim(&self) -> usize {
        self.inputs
    }

    fn output_dim(&self) -> usize {
        self.outputs
    }

    fn decode(&self, z: &[f64]) -> Vec<f64> {
        self.matrix.chunks(self.inputs).map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    fn pullback(&self, _z: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (row, vi) in self.matrix.chunks(self.inputs).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        out
    }
}

/// `x̂₀(t) = (x_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predicted_x0(x_t: &[f64], eps: &[f64], sched: &NoiseSchedule, t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > sched.steps() {
        return Err(invalid(format!("predicted x0 needs 1 <= t <= {}, got {t}", sched.steps())));
    }
    if x_t.len() != eps.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: eps.len() });
    }
    Ok(predicted_x0_from(x_t, eps, sched.alpha_bar(t)))
}

pub(crate) fn predicted_x0_from(x_t: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let noise = (1.0 - alpha_bar).sqrt();
    let signal = alpha_bar.sqrt();
    x_t.iter().zip(eps).map(|(x, e)| (x - noise * e) / signal).collect()
}

/// Everything needed to turn classifier gradients into a per-step guidance vector.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    pub input: GuidanceInput,
    pub temps: TemperedLogits,
    pub schedule: GuidanceSchedule,
    pub normalization: Normalization,
    pub recurrence: usize,
    /// Multiply the `x̂₀` gradient by `∂x̂₀/∂x_t = 1/√ᾱ_t`.
    pub chain_rule: bool,
    pub classifier: Arc<dyn Classifier>,
}

/// Guidance vector for one step plus diagnostics from the first evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceStepOutput {
    pub vector: Vec<f64>,
    pub scale: f64,
    /// Norm of the raw classifier gradient before normalization and scaling.
    pub grad_norm: f64,
    /// Top-1 minus top-2 logit.
    pub logit_margin: f64,
    /// Largest softmax probability at temperature one.
    pub confidence: f64,
}

/// Per-step inputs to [`GuidanceConfig::compute_guidance`].
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub x_t: &'a [f64],
    pub eps: &'a [f64],
    pub t: usize,
    pub class: usize,
    /// `‖Δε‖`, required by [`Normalization::MatchCfgDelta`].
    pub cfg_delta_norm: Option<f64>,
}

pub(crate) struct Diagnostics {
    pub logit_margin: f64,
    pub confidence: f64,
}

pub(crate) fn diagnostics(logits: &[f64]) -> Diagnostics {
    let p = softmax(logits);
    let confidence = p.iter().copied().fold(0.0, f64::max);
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let logit_margin = if sorted.len() > 1 { sorted[0] - sorted[1] } else { 0.0 };
    Diagnostics { logit_margin, confidence }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.temps.validate()?;
        if self.recurrence == 0 {
            return Err(invalid("recurrence must be >= 1"));
        }
        Ok(())
    }

    /// Guidance vector for step `t`: gradient of `log p_{τ₁,τ₂}(y|·)` at the
    /// selected input, normalized and multiplied by the scheduled scale.
    ///
    /// With `recurrence = R > 1` the vector is accumulated over `R`
    /// evaluations; each one shifts `x_t` by the running total and re-derives
    /// `x̂₀` from `denoiser` (or keeps `ε` fixed when none is given).
    pub fn compute_guidance(
        &self,
        sched: &NoiseSchedule,
        step: &StepInput<'_>,
        denoiser: Option<&dyn NoisePredictor>,
    ) -> Result<GuidanceStepOutput> {
        self.compute_inner(sched, step, denoiser, None)
    }

    /// As [`compute_guidance`](Self::compute_guidance) with the classifier
    /// applied to `decoder(·)`; `step.x_t` and `step.eps` live in latent space
    /// and the gradient is pulled back through the decoder.
    pub fn compute_guidance_through_decoder(
        &self,
        sched: &NoiseSchedule,
        step: &StepInput<'_>,
        decoder: &dyn Decoder,
        denoiser: Option<&dyn NoisePredictor>,
    ) -> Result<GuidanceStepOutput> {
        if step.x_t.len() != decoder.latent_dim() {
            return Err(Error::DimensionMismatch { expected: decoder.latent_dim(), got: step.x_t.len() });
        }
        if decoder.output_dim() != self.classifier.dim() {
            return Err(Error::DimensionMismatch { expected: self.classifier.dim(), got: decoder.output_dim() });
        }
        self.compute_inner(sched, step, denoiser, Some(decoder))
    }

    fn compute_inner(
        &self,
        sched: &NoiseSchedule,
        step: &StepInput<'_>,
        denoiser: Option<&dyn NoisePredictor>,
        decoder: Option<&dyn Decoder>,
    ) -> Result<GuidanceStepOutput> {
        self.validate()?;
        let t = step.t;
        if t == 0 || t > sched.steps() {
            return Err(invalid(format!("guidance step {t} outside 1..={}", sched.steps())));
        }
        if step.eps.len() != step.x_t.len() {
            return Err(Error::DimensionMismatch { expected: step.x_t.len(), got: step.eps.len() });
        }
        let scale = self.schedule.scale_at(t)?;
        let alpha_bar = sched.alpha_bar(t);
        let dim = step.x_t.len();

        let mut total = vec![0.0; dim];
        let mut first: Option<(f64, Diagnostics)> = None;
        for r in 0..self.recurrence {
            let shifted: Vec<f64> = step.x_t.iter().zip(&total).map(|(x, a)| x + a).collect();
            let eps = match (r, denoiser) {
                (0, _) | (_, None) => step.eps.to_vec(),
                (_, Some(d)) => d.predict_noise(&shifted, t),
            };
            let latent = match self.input {
                GuidanceInput::NoisySample => shifted,
                GuidanceInput::PredictedX0 => predicted_x0_from(&shifted, &eps, alpha_bar),
            };
            let input = match decoder {
                Some(dec) => dec.decode(&latent),
                None => latent.clone(),
            };
            let (grad_input, logits) =
                guidance_grad_with_logits(self.classifier.as_ref(), &input, step.class, self.temps).map_err(
                    |e| match e {
                        Error::InvalidParameter(_) if input.iter().any(|v| !v.is_finite()) => {
                            Error::NonFinite { step: t, input_norm: norm(&input) }
                        }
                        other => other,
                    },
                )?;
            let mut grad = match decoder {
                Some(dec) => dec.pullback(&latent, &grad_input),
                None => grad_input,
            };
            if self.chain_rule && self.input == GuidanceInput::PredictedX0 {
                let inv = 1.0 / alpha_bar.sqrt();
                grad.iter_mut().for_each(|g| *g *= inv);
            }
            let grad_norm = norm(&grad);
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite { step: t, input_norm: norm(&input) });
            }
            if first.is_none() {
                first = Some((grad_norm, diagnostics(&logits)));
            }
            if scale == 0.0 {
                continue;
            }
            let factor = match self.normalization {
                Normalization::None => 1.0,
                Normalization::UnitGradient => {
                    if grad_norm == 0.0 {
                        return Err(Error::ZeroNorm { what: "classifier gradient", step: t });
                    }
                    1.0 / grad_norm
                }
                Normalization::MatchCfgDelta => {
                    let reference = step
                        .cfg_delta_norm
                        .ok_or_else(|| invalid("match_cfg_delta normalization needs the CFG noise difference"))?;
                    if grad_norm == 0.0 || reference == 0.0 {
                        0.0
                    } else {
                        reference / grad_norm
                    }
                }
            };
            for (acc, g) in total.iter_mut().zip(&grad) {
                *acc += scale * factor * g;
            }
        }
        let (grad_norm, diag) = first.expect("recurrence >= 1");
        Ok(GuidanceStepOutput {
            vector: total,
            scale,
            grad_norm,
            logit_margin: diag.logit_margin,
            confidence: diag.confidence,
        })
    }
}

/// The EDM guidance direction: classifier evaluated at `x / ‖x‖`, gradient
/// returned as a unit vector, together with the raw gradient norm and logits.
pub fn normalized_sample_direction(
    clf: &dyn Classifier,
    x: &[f64],
    class: usize,
    temps: TemperedLogits,
    step: usize,
) -> Result<(Vec<f64>, f64, Vec<f64>)> {
    let xn = norm(x);
    if xn == 0.0 {
        return Err(Error::ZeroNorm { what: "sample", step });
    }
    if !xn.is_finite() {
        return Err(Error::NonFinite { step, input_norm: xn });
    }
    let unit: Vec<f64> = x.iter().map(|v| v / xn).collect();
    let (grad, logits) = guidance_grad_with_logits(clf, &unit, class, temps)?;
    let gn = norm(&grad);
    if !gn.is_finite() {
        return Err(Error::NonFinite { step, input_norm: xn });
    }
    if gn == 0.0 {
        return Err(Error::ZeroNorm { what: "classifier gradient", step });
    }
    Ok((grad.into_iter().map(|g| g / gn).collect(), gn, logits))
}
