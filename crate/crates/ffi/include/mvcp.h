#ifndef MVCP_H
#define MVCP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. The numeric values match the exit codes of
 * the `mvcp` command-line tool where the two overlap.
 */
typedef enum MvcpStatus {
  MVCP_STATUS_OK = 0,
  MVCP_STATUS_INVALID_ARGUMENT = 1,
  MVCP_STATUS_INSUFFICIENT_DATA = 2,
  MVCP_STATUS_NOT_CERTIFIED = 3,
  MVCP_STATUS_IO = 4,
  MVCP_STATUS_NUMERICAL = 5,
  MVCP_STATUS_NULL_POINTER = 6,
  MVCP_STATUS_PANIC = 7,
} MvcpStatus;

/**
 * Calibrated model handle.
 */
typedef struct MvcpModel MvcpModel;

/**
 * Residual matrix handle.
 */
typedef struct MvcpResiduals MvcpResiduals;

/**
 * Certificate fields. Absent values are NaN.
 */
typedef struct MvcpCertificate {
  double eps_target;
  double expected_bound;
  double beta;
  double beta_a;
  double beta_b;
  double eps_certified;
  bool assumptions_convex;
  bool adaptive_penalty;
} MvcpCertificate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * successful call. Valid until the next call into this library.
 */
const char *mvcp_last_error_message(void);

/**
 * Copies `n_rows * n_y` row-major values into a new residual set.
 *
 * # Safety
 * `data` must point to `n_rows * n_y` readable doubles (or may be NULL when
 * `n_rows` is 0); `out` must be a valid pointer.
 */
enum MvcpStatus mvcp_residuals_new(const double *data,
                                   size_t n_rows,
                                   size_t n_y,
                                   struct MvcpResiduals **out);

/**
 * Reads a residual CSV with a header row.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum MvcpStatus mvcp_residuals_read_csv(const char *path, struct MvcpResiduals **out);

/**
 * # Safety
 * `set` must be NULL or a handle from this library not yet freed.
 */
void mvcp_residuals_free(struct MvcpResiduals *set);

/**
 * Number of rows, or 0 for NULL.
 *
 * # Safety
 * `set` must be NULL or a live handle.
 */
size_t mvcp_residuals_len(const struct MvcpResiduals *set);

/**
 * Residual dimension, or 0 for NULL.
 *
 * # Safety
 * `set` must be NULL or a live handle.
 */
size_t mvcp_residuals_dim(const struct MvcpResiduals *set);

/**
 * Calibrates a model. `method` is one of `scp1`, `scp-dim`, `scp-split-a`,
 * `scp-split-b`, `remmcp`, `relmcp`; `score` (`sphere`, `interval`,
 * `ellipsoid`, `union:K`, `rbf:N`) is required for the last two and may be
 * NULL otherwise. Split methods use a reserved fraction of 0.25 and 3
 * clusters. Returns `MVCP_STATUS_NOT_CERTIFIED` when relaxation finds no
 * certified solution.
 *
 * # Safety
 * `cal` must be a live handle, the strings NUL-terminated, `out` valid.
 */
enum MvcpStatus mvcp_calibrate(const struct MvcpResiduals *cal,
                               const char *method,
                               const char *score,
                               double eps,
                               double beta,
                               uint64_t seed,
                               struct MvcpModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from this library not yet freed.
 */
void mvcp_model_free(struct MvcpModel *model);

/**
 * Whether the residual `r` (length `n_y`) lies in the prediction set.
 *
 * # Safety
 * `model` must be a live handle, `r` readable for `n_y` doubles, `out` valid.
 */
enum MvcpStatus mvcp_model_contains(const struct MvcpModel *model,
                                    const double *r,
                                    size_t n_y,
                                    bool *out);

/**
 * Fraction of `test` inside the prediction set.
 *
 * # Safety
 * Both handles must be live; `out` valid.
 */
enum MvcpStatus mvcp_model_coverage(const struct MvcpModel *model,
                                    const struct MvcpResiduals *test,
                                    double *out);

/**
 * Parameter count of the calibrated set, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t mvcp_model_n_params(const struct MvcpModel *model);

/**
 * Copies the calibrated parameters into `out`, which holds `len` doubles.
 *
 * # Safety
 * `model` must be a live handle and `out` writable for `len` doubles.
 */
enum MvcpStatus mvcp_model_params(const struct MvcpModel *model, double *out, size_t len);

/**
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
enum MvcpStatus mvcp_model_certificate(const struct MvcpModel *model, struct MvcpCertificate *out);

/**
 * Writes the model as JSON.
 *
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum MvcpStatus mvcp_model_save(const struct MvcpModel *model, const char *path);

/**
 * Reads a model JSON file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum MvcpStatus mvcp_model_load(const char *path, struct MvcpModel **out);

/**
 * Split conformal outlier budget `floor(eps (n_cal + 1)) - 1`.
 *
 * # Safety
 * `out` must be valid.
 */
enum MvcpStatus mvcp_scp_outlier_budget(size_t n_cal, double eps, size_t *out);

/**
 * Removal outlier budget `floor(eps (n_cal + 1) / n_q) - 1`.
 *
 * # Safety
 * `out` must be valid.
 */
enum MvcpStatus mvcp_mcp_outlier_budget(size_t n_cal, double eps, size_t n_q, size_t *out);

/**
 * Certificate of the removal scheme for given budget and parameter count.
 *
 * # Safety
 * `out` must be valid.
 */
enum MvcpStatus mvcp_remmcp_certificate(size_t n_cal,
                                        size_t n_q,
                                        size_t rho,
                                        double eps,
                                        struct MvcpCertificate *out);

/**
 * A-posteriori miscoverage certified with confidence `1 - beta` for a
 * relaxed solution of complexity `d` after `n_eval` penalty evaluations.
 *
 * # Safety
 * `out` must be valid.
 */
enum MvcpStatus mvcp_certified_miscoverage(size_t n_cal,
                                           size_t d,
                                           double beta,
                                           size_t n_eval,
                                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MVCP_H */
