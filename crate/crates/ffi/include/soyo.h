#ifndef SOYO_H
#define SOYO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SoyoStatus {
  SOYO_STATUS_OK = 0,
  SOYO_STATUS_NULL_ARGUMENT = 1,
  SOYO_STATUS_INVALID_ARGUMENT = 2,
  SOYO_STATUS_NUMERIC = 3,
  SOYO_STATUS_FORMAT = 4,
  SOYO_STATUS_IO = 5,
  SOYO_STATUS_PANIC = 6,
} SoyoStatus;

/**
 * A fitted Gaussian mixture.
 */
typedef struct SoyoGmm SoyoGmm;

/**
 * A loaded model store.
 */
typedef struct SoyoStore SoyoStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *soyo_version(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on this thread.
 */
const char *soyo_last_error(void);

/**
 * Fits a `k`-component mixture to `n_rows x dim` data.
 *
 * # Safety
 * `data` must point to `n_rows * dim` doubles and `out` to writable storage.
 */
enum SoyoStatus soyo_gmm_fit(const double *data,
                             size_t n_rows,
                             size_t dim,
                             size_t k,
                             bool full_cov,
                             uint64_t seed,
                             struct SoyoGmm **out);

/**
 * # Safety
 * `gmm` must be null or a handle from [`soyo_gmm_fit`] not yet freed.
 */
void soyo_gmm_free(struct SoyoGmm *gmm);

/**
 * # Safety
 * `gmm` must be a live handle; `k` and `dim` writable (either may be null).
 */
enum SoyoStatus soyo_gmm_shape(const struct SoyoGmm *gmm, size_t *k, size_t *dim);

/**
 * Number of stored real parameters.
 *
 * # Safety
 * `gmm` must be a live handle and `out` writable.
 */
enum SoyoStatus soyo_gmm_param_count(const struct SoyoGmm *gmm, size_t *out);

/**
 * Copies the `k` mixture weights into `weights`.
 *
 * # Safety
 * `gmm` must be a live handle and `weights` must hold `len` doubles.
 */
enum SoyoStatus soyo_gmm_weights(const struct SoyoGmm *gmm, double *weights, size_t len);

/**
 * Log-density of one point.
 *
 * # Safety
 * `x` must point to `dim` doubles and `out` must be writable.
 */
enum SoyoStatus soyo_gmm_logpdf(const struct SoyoGmm *gmm,
                                const double *x,
                                size_t dim,
                                double *out);

/**
 * Bayesian information criterion of the model on `n_rows x dim` data.
 *
 * # Safety
 * `data` must point to `n_rows * dim` doubles and `out` must be writable.
 */
enum SoyoStatus soyo_gmm_bic(const struct SoyoGmm *gmm,
                             const double *data,
                             size_t n_rows,
                             size_t dim,
                             double *out);

/**
 * Draws `n` samples into `out` (`n * dim` doubles, row-major).
 *
 * # Safety
 * `out` must hold `out_len` doubles.
 */
enum SoyoStatus soyo_gmm_sample(const struct SoyoGmm *gmm,
                                size_t n,
                                uint64_t seed,
                                double *out,
                                size_t out_len);

/**
 * Component count in `k_min..=k_max` minimizing BIC.
 *
 * # Safety
 * `data` must point to `n_rows * dim` doubles and `out_k` must be writable.
 */
enum SoyoStatus soyo_select_k(const double *data,
                              size_t n_rows,
                              size_t dim,
                              size_t k_min,
                              size_t k_max,
                              bool full_cov,
                              uint64_t seed,
                              size_t *out_k);

/**
 * Loads a model store written by the `soyo` tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SoyoStatus soyo_store_load(const char *path, struct SoyoStore **out);

/**
 * # Safety
 * `store` must be null or a handle from [`soyo_store_load`] not yet freed.
 */
void soyo_store_free(struct SoyoStore *store);

/**
 * Number of domains with stored compressors.
 *
 * # Safety
 * `store` must be a live handle and `out` writable.
 */
enum SoyoStatus soyo_store_n_domains(const struct SoyoStore *store, size_t *out);

/**
 * Routes `n_rows` samples to 0-based domain indices using the store's
 * selector (fusion network if present, else nearest mean, else k-means).
 * `mid` may be null when the selector uses only the last level.
 *
 * # Safety
 * `mid` (if non-null) and `last` must point to `n_rows * dim` doubles;
 * `out_domains` must hold `n_rows` values.
 */
enum SoyoStatus soyo_store_predict(const struct SoyoStore *store,
                                   const double *mid,
                                   const double *last,
                                   size_t n_rows,
                                   size_t dim,
                                   size_t *out_domains);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOYO_H */
