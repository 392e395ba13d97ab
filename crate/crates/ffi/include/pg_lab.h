#ifndef PG_LAB_H
#define PG_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_POINTER = 1,
  PG_STATUS_LENGTH_MISMATCH = 2,
  PG_STATUS_NON_FINITE = 3,
  PG_STATUS_DEGENERATE_REFERENCE = 4,
  PG_STATUS_INVALID_ARGUMENT = 5,
  PG_STATUS_DIVISION_BY_ZERO = 6,
  PG_STATUS_UNSUPPORTED = 7,
  PG_STATUS_BUFFER_TOO_SMALL = 8,
  PG_STATUS_PANIC = 99,
} PgStatus;

/**
 * Parameterization of a raw model output.
 */
typedef enum PgPredictionKind {
  PG_PREDICTION_KIND_EPSILON = 0,
  PG_PREDICTION_KIND_VELOCITY_DDPM = 1,
  PG_PREDICTION_KIND_DENOISED = 2,
  PG_PREDICTION_KIND_VELOCITY_RF = 3,
  PG_PREDICTION_KIND_EDM = 4,
} PgPredictionKind;

/**
 * Analytic Gaussian mixture. Opaque to C.
 */
typedef struct PgMixture PgMixture;

/**
 * Momentum buffer for repeated guidance updates. Opaque to C.
 */
typedef struct PgMomentum PgMomentum;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pg_version(void);

/**
 * `out = cond + (w - 1) * (cond - uncond)`.
 *
 * # Safety
 * `cond`, `uncond` and `out` must each point to `len` doubles.
 */
enum PgStatus pg_cfg_combine(const double *cond,
                             const double *uncond,
                             size_t len,
                             double w,
                             double *out);

/**
 * Creates a zeroed momentum buffer. Returns NULL if `beta` is not finite.
 */
struct PgMomentum *pg_momentum_new(double beta, size_t len);

/**
 * # Safety
 * `m` must be NULL or a handle from [`pg_momentum_new`] not yet freed.
 */
void pg_momentum_free(struct PgMomentum *m);

/**
 * Zeroes the buffer, as at the start of a new trajectory.
 *
 * # Safety
 * `m` must be a live handle from [`pg_momentum_new`].
 */
enum PgStatus pg_momentum_reset(struct PgMomentum *m);

/**
 * Copies the running average into `out`.
 *
 * # Safety
 * `m` must be a live handle; `out` must point to `len` doubles.
 */
enum PgStatus pg_momentum_average(const struct PgMomentum *m, double *out, size_t len);

/**
 * One adaptive projected guidance update. The momentum coefficient is the
 * one the handle was created with; `r <= 0` disables rescaling.
 *
 * # Safety
 * `m` must be a live handle; vector arguments must point to `len` doubles.
 */
enum PgStatus pg_apg_update(const double *cond,
                            const double *uncond,
                            size_t len,
                            double w,
                            double eta,
                            double r,
                            struct PgMomentum *m,
                            double *out);

/**
 * Splits `delta` into parts parallel and orthogonal to `reference`.
 *
 * # Safety
 * All pointers must reference `len` doubles.
 */
enum PgStatus pg_split_parallel_orthogonal(const double *delta,
                                           const double *reference,
                                           size_t len,
                                           double *parallel_out,
                                           double *orthogonal_out);

/**
 * Scales `delta` down to norm `r` when longer; `r <= 0` copies it unchanged.
 *
 * # Safety
 * `delta` and `out` must point to `len` doubles.
 */
enum PgStatus pg_clamp_norm(const double *delta, size_t len, double r, double *out);

/**
 * Writes the gain factor and the sign of `<cond - uncond, cond>`.
 *
 * # Safety
 * `cond` and `uncond` must point to `len` doubles; the outputs to one each.
 */
enum PgStatus pg_gain_factor(const double *cond,
                             const double *uncond,
                             size_t len,
                             double w,
                             double *value_out,
                             double *alignment_out);

/**
 * Converts a raw output to a denoised prediction. `kind` is a
 * [`PgPredictionKind`] value. `sigma_data` is used only for the EDM kind,
 * where `alpha` must be 1.
 *
 * # Safety
 * `z`, `raw` and `out` must point to `len` doubles.
 */
enum PgStatus pg_to_denoised(uint32_t kind,
                             const double *z,
                             const double *raw,
                             size_t len,
                             double alpha,
                             double sigma,
                             double sigma_data,
                             double *out);

/**
 * Inverse of [`pg_to_denoised`]; unsupported for the EDM kind.
 *
 * # Safety
 * `z`, `denoised` and `out` must point to `len` doubles.
 */
enum PgStatus pg_from_denoised(uint32_t kind,
                               const double *z,
                               const double *denoised,
                               size_t len,
                               double alpha,
                               double sigma,
                               double *out);

/**
 * Writes `steps + 1` noise levels, descending and ending in 0.
 *
 * # Safety
 * `out` must point to `out_len` doubles.
 */
enum PgStatus pg_karras_sigmas(double sigma_min,
                               double sigma_max,
                               double rho,
                               size_t steps,
                               double *out,
                               size_t out_len);

/**
 * Creates a mixture of isotropic Gaussians. `means` is row-major
 * `components x dim`. Returns NULL on invalid input.
 *
 * # Safety
 * `means` must point to `components * dim` doubles and `weights` to
 * `components` doubles.
 */
struct PgMixture *pg_mixture_new(const double *means,
                                 size_t components,
                                 size_t dim,
                                 double component_sigma,
                                 const double *weights);

/**
 * # Safety
 * `m` must be NULL or a handle from [`pg_mixture_new`] not yet freed.
 */
void pg_mixture_free(struct PgMixture *m);

/**
 * Posterior mean of the clean sample under the whole mixture.
 *
 * # Safety
 * `m` must be a live handle; `z` and `out` must point to `dim` doubles.
 */
enum PgStatus pg_mixture_denoise_uncond(const struct PgMixture *m,
                                        const double *z,
                                        size_t dim,
                                        double sigma,
                                        double *out);

/**
 * Posterior mean of the clean sample under one component.
 *
 * # Safety
 * `m` must be a live handle; `z` and `out` must point to `dim` doubles.
 */
enum PgStatus pg_mixture_denoise_cond(const struct PgMixture *m,
                                      size_t class_index,
                                      const double *z,
                                      size_t dim,
                                      double sigma,
                                      double *out);

/**
 * Mean HSV saturation of an interleaved RGB image with values in [0, 1].
 *
 * # Safety
 * `rgb` must point to `3 * width * height` doubles; `out` to one.
 */
enum PgStatus pg_mean_saturation(const double *rgb, size_t width, size_t height, double *out);

/**
 * Standard deviation of luma of an interleaved RGB image.
 *
 * # Safety
 * `rgb` must point to `3 * width * height` doubles; `out` to one.
 */
enum PgStatus pg_rms_contrast(const double *rgb, size_t width, size_t height, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PG_LAB_H */
