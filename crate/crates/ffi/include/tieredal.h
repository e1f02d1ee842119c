#ifndef TIEREDAL_H
#define TIEREDAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TdStatus {
  TD_STATUS_OK = 0,
  TD_STATUS_INVALID_ARGUMENT = 1,
  TD_STATUS_FORMAT = 2,
  TD_STATUS_VALIDATION = 3,
  TD_STATUS_DEGENERATE_POOL = 4,
  TD_STATUS_NUMERICAL_DOMAIN = 5,
  TD_STATUS_BUDGET_EXHAUSTED = 6,
  TD_STATUS_INSUFFICIENT_DATA = 7,
  TD_STATUS_UNREACHABLE_TARGET = 8,
  TD_STATUS_IO = 9,
  TD_STATUS_SERIALIZATION = 10,
  TD_STATUS_NULL_POINTER = 11,
  TD_STATUS_PANIC = 12,
} TdStatus;

/**
 * Opaque dataset handle.
 */
typedef struct TdDataset TdDataset;

/**
 * Opaque model handle.
 */
typedef struct TdModel TdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread, or an empty string.
 */
const char *td_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *td_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void td_string_free(char *s);

/**
 * Generates Gaussian blobs: `num_classes * per_class` points in `dim`
 * dimensions.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum TdStatus td_dataset_generate(size_t num_classes,
                                  size_t per_class,
                                  size_t dim,
                                  double spread,
                                  uint64_t rng_seed,
                                  struct TdDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum TdStatus td_dataset_load(const char *path, struct TdDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `path` a NUL-terminated string.
 */
enum TdStatus td_dataset_save(const struct TdDataset *ds, const char *path);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not used afterwards.
 */
void td_dataset_free(struct TdDataset *ds);

/**
 * Row count, feature dimension and class count of a dataset. Any out
 * pointer may be null.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum TdStatus td_dataset_shape(const struct TdDataset *ds,
                               size_t *rows,
                               size_t *dim,
                               size_t *num_classes);

/**
 * Trains a linear softmax model on every row of `ds` for at most `epochs`
 * epochs.
 *
 * # Safety
 * `ds` must be a live handle; `out` a valid handle slot.
 */
enum TdStatus td_model_train(const struct TdDataset *ds,
                             size_t epochs,
                             uint64_t rng_seed,
                             struct TdModel **out);

/**
 * Loads a model written by an experiment run.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid handle slot.
 */
enum TdStatus td_model_load(const char *path, struct TdModel **out);

/**
 * # Safety
 * `m` must be a live handle; `path` a NUL-terminated string.
 */
enum TdStatus td_model_save(const struct TdModel *m, const char *path);

/**
 * # Safety
 * `m` must be null or a handle from this library, not used afterwards.
 */
void td_model_free(struct TdModel *m);

/**
 * Class probabilities for every row of `ds`, written row-major into `out`
 * (`rows * num_classes` doubles).
 *
 * # Safety
 * Handles must be live; `out` must hold `out_len` doubles.
 */
enum TdStatus td_model_predict_proba(const struct TdModel *m,
                                     const struct TdDataset *ds,
                                     double *out,
                                     size_t out_len);

/**
 * Log-determinant of a symmetric positive definite `n x n` matrix given
 * row-major.
 *
 * # Safety
 * `a` must point to `n * n` doubles; `out` must be writable.
 */
enum TdStatus td_log_det(const double *a, size_t n, double *out);

/**
 * LogDetMI of subset `subset` of the candidate rows against the query rows,
 * using cosine kernels regularized by `lambda`.
 *
 * # Safety
 * `candidates` holds `n_candidates * dim` doubles, `query` holds
 * `n_query * dim`, `subset` holds `k` indices; `out` must be writable.
 */
enum TdStatus td_logdetmi(const double *candidates,
                          size_t n_candidates,
                          const double *query,
                          size_t n_query,
                          size_t dim,
                          const size_t *subset,
                          size_t k,
                          double lambda,
                          double *out);

/**
 * Greedy LogDetMI maximization: writes the `k` chosen candidate indices in
 * pick order, and optionally each step's marginal gain.
 *
 * # Safety
 * Matrix pointers as in [`td_logdetmi`]; `out_indices` holds `k` entries and
 * `out_gains` is null or holds `k` doubles.
 */
enum TdStatus td_smi_greedy(const double *candidates,
                            size_t n_candidates,
                            const double *query,
                            size_t n_query,
                            size_t dim,
                            size_t k,
                            double lambda,
                            size_t *out_indices,
                            double *out_gains);

/**
 * `c_v * n_correct + c_a * (n - n_correct)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum TdStatus td_labeling_cost(size_t n_correct, size_t n, double c_a, double c_v, double *out);

/**
 * Runs an experiment described by a JSON config (missing fields take their
 * defaults). On success `*out_json` receives a JSON array with one results
 * document per run, to be released with [`td_string_free`]. When `out_dir`
 * is non-null the usual per-run files are written there too.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string, `out_dir` null or one,
 * and `out_json` writable.
 */
enum TdStatus td_run_experiment(const char *config_json, const char *out_dir, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIEREDAL_H */
