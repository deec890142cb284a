#ifndef SPANET_H
#define SPANET_H

/* Generated by cbindgen from the spanet-capi crate. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code for every fallible API call.
 */
enum SpanetStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  /**
   * The call succeeded.
   */
  SPANET_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SPANET_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument or configuration was rejected (wrong length, bad JSON,
   * invalid dimensions, unsupported flag combination).
   */
  SPANET_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written, or stored bytes were malformed.
   */
  SPANET_STATUS_IO = 3,
  /**
   * A numerical procedure failed (eigensolver non-convergence,
   * degenerate graph).
   */
  SPANET_STATUS_NUMERIC = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  SPANET_STATUS_PANIC = 5,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SpanetStatus SpanetStatus;
#else
typedef int32_t SpanetStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Patch-graph family for frequency-response campaigns.
 */
enum SpanetGraph
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  /**
   * Window-connectivity grid graph, profiled with convolution supports.
   */
  SPANET_GRAPH_GRID = 0,
  /**
   * Complete graph, profiled with attention supports.
   */
  SPANET_GRAPH_COMPLETE = 1,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SpanetGraph SpanetGraph;
#else
typedef int32_t SpanetGraph;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Spectral-mask layout for the SPAM mixer.
 */
enum SpanetMaskMode
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  /**
   * One mask plane per channel.
   */
  SPANET_MASK_MODE_DEPTHWISE = 0,
  /**
   * One mask plane shared by all channels of a head.
   */
  SPANET_MASK_MODE_SINGLE = 1,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum SpanetMaskMode SpanetMaskMode;
#else
typedef int32_t SpanetMaskMode;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque backbone: four downsampling stages plus classifier head.
 */
typedef struct SpanetModel SpanetModel;

/**
 * Opaque campaign result: per-trial spectra plus binned aggregate.
 */
typedef struct SpanetProfile SpanetProfile;

/**
 * Opaque SPAM mixer: parameters fixed at creation for one resolution.
 */
typedef struct SpanetSpam SpanetSpam;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; never null.
 */
const char *spanet_version(void);

/**
 * Description of the most recent failure on this thread; empty after a
 * successful call. Valid until the next `spanet_*` call on this thread.
 */
const char *spanet_last_error_message(void);

/**
 * Run a randomized frequency-response campaign on `patch x patch` graphs.
 *
 * For `SPANET_GRAPH_GRID`, `kernel` is the odd convolution window size; for
 * `SPANET_GRAPH_COMPLETE` it must be 0. On success `*out` owns the result
 * and must be released with `spanet_profile_free`.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
SpanetStatus spanet_profile_run(SpanetGraph graph,
                                size_t kernel,
                                size_t trials,
                                size_t patch,
                                uint64_t seed,
                                struct SpanetProfile **out);

/**
 * Number of trials recorded in the profile.
 *
 * # Safety
 * `profile` must be a live handle from `spanet_profile_run`; `out` must be
 * writable.
 */
SpanetStatus spanet_profile_trial_count(const struct SpanetProfile *profile, size_t *out);

/**
 * Mean absolute response over eigenvalues in `[lo, hi]`, pooled across all
 * trials; 0 when the band is empty.
 *
 * # Safety
 * `profile` must be a live handle; `out` must be writable.
 */
SpanetStatus spanet_profile_band_mean(const struct SpanetProfile *profile,
                                      double lo,
                                      double hi,
                                      double *out);

/**
 * Write per-trial rows (`trial,lambda,phi`) as CSV.
 *
 * # Safety
 * `profile` must be a live handle; `path` a valid NUL-terminated string.
 */
SpanetStatus spanet_profile_export_trials(const struct SpanetProfile *profile, const char *path);

/**
 * Write the binned aggregate (`bin_lo,bin_hi,mean_abs,std_abs,count`) as CSV.
 *
 * # Safety
 * `profile` must be a live handle; `path` a valid NUL-terminated string.
 */
SpanetStatus spanet_profile_export_aggregate(const struct SpanetProfile *profile, const char *path);

/**
 * Release a profile handle. Passing null is a no-op.
 *
 * # Safety
 * `profile` must be null or a handle not yet freed.
 */
void spanet_profile_free(struct SpanetProfile *profile);

/**
 * Create a seeded SPAM mixer for `dim`-channel maps of `height x width`.
 * `dim` must be divisible by 4 (one spectral head per kernel size). On
 * success `*out` owns the mixer; release with `spanet_spam_free`.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
SpanetStatus spanet_spam_new(size_t dim,
                             size_t height,
                             size_t width,
                             SpanetMaskMode mask_mode,
                             int32_t biases,
                             uint64_t seed,
                             struct SpanetSpam **out);

/**
 * Number of learnable scalars in the mixer.
 *
 * # Safety
 * `spam` must be a live handle; `out` must be writable.
 */
SpanetStatus spanet_spam_param_count(const struct SpanetSpam *spam, size_t *out);

/**
 * Apply the mixer. `input` and `output` are `dim * height * width` doubles
 * in channel-major order (channel, then row, then column); both length
 * arguments must equal that product.
 *
 * # Safety
 * `spam` must be a live handle; `input` must hold `input_len` readable
 * doubles and `output` `output_len` writable doubles.
 */
SpanetStatus spanet_spam_forward(const struct SpanetSpam *spam,
                                 const double *input,
                                 size_t input_len,
                                 double *output,
                                 size_t output_len);

/**
 * Release a mixer handle. Passing null is a no-op.
 *
 * # Safety
 * `spam` must be null or a handle not yet freed.
 */
void spanet_spam_free(struct SpanetSpam *spam);

/**
 * Build a model from a JSON architecture config (same schema as the CLI's
 * `model --config` file). On success `*out` owns the model; release with
 * `spanet_model_free`.
 *
 * # Safety
 * `config_json` must be a valid NUL-terminated string; `out` must point to
 * writable storage for one pointer.
 */
SpanetStatus spanet_model_build(const char *config_json, struct SpanetModel **out);

/**
 * Number of learnable scalars, classifier head included.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
SpanetStatus spanet_model_param_count(const struct SpanetModel *model, size_t *out);

/**
 * Side length of the square input image the model expects.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
SpanetStatus spanet_model_input_size(const struct SpanetModel *model, size_t *out);

/**
 * Classifier output width.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
SpanetStatus spanet_model_num_classes(const struct SpanetModel *model, size_t *out);

/**
 * Classify one image. `image` holds `3 * side * side` doubles
 * (channel-major); `logits` receives `num_classes` doubles.
 *
 * # Safety
 * `model` must be a live handle; `image` must hold `image_len` readable
 * doubles and `logits` `logits_len` writable doubles.
 */
SpanetStatus spanet_model_forward(const struct SpanetModel *model,
                                  const double *image,
                                  size_t image_len,
                                  double *logits,
                                  size_t logits_len);

/**
 * Release a model handle. Passing null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void spanet_model_free(struct SpanetModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPANET_H */
