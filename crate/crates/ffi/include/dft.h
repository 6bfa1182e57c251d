#ifndef DFT_H
#define DFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DftMode {
  DFT_MODE_UNNORMALIZED = 0,
  DFT_MODE_LENGTH_NORMALIZED = 1,
} DftMode;

typedef enum DftStatus {
  DFT_STATUS_OK = 0,
  DFT_STATUS_NULL_POINTER = 1,
  DFT_STATUS_INVALID_ARGUMENT = 2,
  DFT_STATUS_IO = 3,
  DFT_STATUS_FORMAT = 4,
  DFT_STATUS_NUMERIC = 5,
  DFT_STATUS_SHAPE_MISMATCH = 6,
  DFT_STATUS_BUFFER_TOO_SMALL = 7,
  DFT_STATUS_PANIC = 8,
} DftStatus;

typedef enum DftVariant {
  DFT_VARIANT_DFT = 0,
  DFT_VARIANT_DFT2 = 1,
} DftVariant;

/**
 * Opaque per-example estimator state.
 */
typedef struct DftEstimator DftEstimator;

/**
 * Opaque model parameters.
 */
typedef struct DftModel DftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message on this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dft_last_error(char *buf, size_t len);

/**
 * Seeded random model; `seed` selects the initialization stream.
 *
 * # Safety
 * `out` must point to writable storage for one handle.
 */
enum DftStatus dft_model_init(size_t vocab_size,
                              size_t d_model,
                              size_t n_layers,
                              size_t max_len,
                              uint64_t seed,
                              struct DftModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one handle.
 */
enum DftStatus dft_model_load(const char *path, struct DftModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum DftStatus dft_model_save(const struct DftModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle from this library that is not used again.
 */
void dft_model_free(struct DftModel *model);

/**
 * Length of the flat parameter view, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dft_model_num_params(const struct DftModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t dft_model_vocab_size(const struct DftModel *model);

/**
 * `log P(y|x)` in nats. `y` must end with token 0.
 *
 * # Safety
 * `x`/`y` must point to `x_len`/`y_len` readable ids; `out` to one double.
 */
enum DftStatus dft_sequence_logprob(const struct DftModel *model,
                                    const uint32_t *x,
                                    size_t x_len,
                                    const uint32_t *y,
                                    size_t y_len,
                                    double *out);

/**
 * `log P(y|x)` and its gradient. `grad` may be null to skip the copy;
 * otherwise it must hold `dft_model_num_params` doubles.
 *
 * # Safety
 * Pointer arguments must be valid for the stated lengths.
 */
enum DftStatus dft_logprob_grad(const struct DftModel *model,
                                const uint32_t *x,
                                size_t x_len,
                                const uint32_t *y,
                                size_t y_len,
                                double *out_value,
                                double *grad,
                                size_t grad_len);

/**
 * Exact candidate-set loss `−s(y_pos) + τ log mean_j w_j` and gradient.
 * Candidates are concatenated in `cand_tokens`; `cand_lens[j]` gives the
 * length of candidate `j` and `cand_logp_base[j]` its base log-probability.
 *
 * # Safety
 * Pointer arguments must be valid for the stated lengths; the sum of
 * `cand_lens` must not exceed the length of `cand_tokens`.
 */
enum DftStatus dft_exact_loss(const struct DftModel *model,
                              const uint32_t *x,
                              size_t x_len,
                              const uint32_t *y_pos,
                              size_t y_pos_len,
                              const uint32_t *cand_tokens,
                              const size_t *cand_lens,
                              const double *cand_logp_base,
                              size_t n_cands,
                              double tau,
                              enum DftMode mode,
                              enum DftVariant variant,
                              double *out_value,
                              double *grad,
                              size_t grad_len);

/**
 * One log-domain moving-average step on a bare value.
 *
 * # Safety
 * `log_weights` must hold `n` doubles; `out` must point to one double.
 */
enum DftStatus dft_update_u_log(double log_u,
                                const double *log_weights,
                                size_t n,
                                double gamma,
                                double *out);

/**
 * `n` estimators initialized to `log u = 0`.
 *
 * # Safety
 * `out` must point to writable storage for one handle.
 */
enum DftStatus dft_estimator_new(size_t n, struct DftEstimator **out);

/**
 * # Safety
 * `state` must be null or a handle from this library that is not used again.
 */
void dft_estimator_free(struct DftEstimator *state);

/**
 * Updates entry `i` and writes its new value to `out` (may be null).
 *
 * # Safety
 * `state` must be a live handle; `log_weights` must hold `n` doubles.
 */
enum DftStatus dft_estimator_update(struct DftEstimator *state,
                                    size_t i,
                                    const double *log_weights,
                                    size_t n,
                                    double gamma,
                                    double *out);

/**
 * # Safety
 * `state` must be a live handle; `out` must point to one double.
 */
enum DftStatus dft_estimator_get(const struct DftEstimator *state, size_t i, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DFT_H */
