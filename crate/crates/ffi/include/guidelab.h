#ifndef GUIDELAB_H
#define GUIDELAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GlStatus {
  GL_STATUS_OK = 0,
  GL_STATUS_NULL_POINTER = 1,
  GL_STATUS_INVALID_ARGUMENT = 2,
  GL_STATUS_DIMENSION_MISMATCH = 3,
  GL_STATUS_NOT_POSITIVE_DEFINITE = 4,
  GL_STATUS_NUMERIC = 5,
  GL_STATUS_CONFIG = 6,
  GL_STATUS_IO = 7,
  GL_STATUS_PANIC = 8,
} GlStatus;

// A logit provider used for guidance gradients.
typedef struct GlClassifier GlClassifier;

// A Gaussian mixture with class labels.
typedef struct GlMixture GlMixture;

// A finished sampler run and the configuration that produced it.
typedef struct GlRun GlRun;

// Sample quality of a run against its target component.
typedef struct GlQuality {
  double accuracy;
  double moment_distance;
  double target_log_likelihood;
  // Nonzero when the sample covariance is singular.
  int32_t degenerate;
} GlQuality;

// Message of the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *gl_last_error(void);

// Library version as a static NUL-terminated string.
const char *gl_version(void);

// Builds a mixture of `k` components in `d` dimensions. `means` holds
// `k·d` values and `covs` holds `k` row-major `d×d` matrices.
//
// # Safety
// Pointers must reference arrays of the stated sizes; `out` must be writable.
enum GlStatus gl_mixture_new(size_t k,
                             size_t d,
                             const double *weights,
                             const double *means,
                             const double *covs,
                             struct GlMixture **out);

// The built-in three-class benchmark mixture in two dimensions.
//
// # Safety
// `out` must be writable.
enum GlStatus gl_mixture_default(struct GlMixture **out);

// # Safety
// `m` must come from a mixture constructor and not be used afterwards.
void gl_mixture_free(struct GlMixture *m);

// Dimension of the mixture, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t gl_mixture_dim(const struct GlMixture *m);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t gl_mixture_num_classes(const struct GlMixture *m);

// `log p(x)`.
//
// # Safety
// `x` must hold `dim` values and `out` must be writable.
enum GlStatus gl_mixture_log_density(const struct GlMixture *m, const double *x, double *out);

// Class posterior `P(k|x)` for every class; `out` holds `num_classes` values.
//
// # Safety
// `x` must hold `dim` values and `out` `out_len` writable values.
enum GlStatus gl_mixture_posterior(const struct GlMixture *m,
                                   const double *x,
                                   double *out,
                                   size_t out_len);

// Marginal score `∇ log p(x)`; `out` holds `dim` values.
//
// # Safety
// `x` must hold `dim` values and `out` `out_len` writable values.
enum GlStatus gl_mixture_score(const struct GlMixture *m,
                               const double *x,
                               double *out,
                               size_t out_len);

// `∇ log P(class|x)`; `out` holds `dim` values.
//
// # Safety
// `x` must hold `dim` values and `out` `out_len` writable values.
enum GlStatus gl_mixture_log_conditional_grad(const struct GlMixture *m,
                                              const double *x,
                                              size_t class_,
                                              double *out,
                                              size_t out_len);

// The exact Bayes classifier of a mixture. The classifier keeps its own
// reference, so the mixture handle may be freed independently.
//
// # Safety
// `m` must be a live handle and `out` writable.
enum GlStatus gl_classifier_bayes(const struct GlMixture *m, struct GlClassifier **out);

// # Safety
// `c` must come from a classifier constructor and not be used afterwards.
void gl_classifier_free(struct GlClassifier *c);

// Logits at `x`; `out` holds `num_classes` values.
//
// # Safety
// `x` must hold the classifier's input dimension and `out` `out_len` values.
enum GlStatus gl_classifier_logits(const struct GlClassifier *c,
                                   const double *x,
                                   double *out,
                                   size_t out_len);

// Gradient of `τ₁ f_y(x) − log Σ_i exp(τ₂ f_i(x))` with respect to `x`.
//
// # Safety
// `x` must hold the classifier's input dimension and `out` `out_len` values.
enum GlStatus gl_guidance_grad(const struct GlClassifier *c,
                               const double *x,
                               size_t class_,
                               double tau1,
                               double tau2,
                               double *out,
                               size_t out_len);

// Builds the run described by a TOML configuration (the format accepted
// by the command-line tool; empty for all defaults) and samples it.
//
// # Safety
// `config_toml` must be a NUL-terminated string and `out` writable.
enum GlStatus gl_run_new(const char *config_toml, struct GlRun **out);

// # Safety
// `r` must come from [`gl_run_new`] and not be used afterwards.
void gl_run_free(struct GlRun *r);

// Number of samples, or 0 for a null handle.
//
// # Safety
// `r` must be null or a live handle.
size_t gl_run_num_samples(const struct GlRun *r);

// Sample dimension, or 0 for a null handle.
//
// # Safety
// `r` must be null or a live handle.
size_t gl_run_dim(const struct GlRun *r);

// Number of sampler steps, or 0 for a null handle.
//
// # Safety
// `r` must be null or a live handle.
size_t gl_run_num_steps(const struct GlRun *r);

// Copies the samples row-major into `out` (`num_samples · dim` values).
//
// # Safety
// `out` must hold `out_len` writable values.
enum GlStatus gl_run_samples(const struct GlRun *r, double *out, size_t out_len);

// Mean raw classifier-gradient norm per step, noisiest step first.
//
// # Safety
// `out` must hold `out_len` writable values.
enum GlStatus gl_run_grad_norms(const struct GlRun *r, double *out, size_t out_len);

// Quality of the samples against the run's target class.
//
// # Safety
// `out` must be writable.
enum GlStatus gl_run_quality(const struct GlRun *r, struct GlQuality *out);

#endif  /* GUIDELAB_H */
