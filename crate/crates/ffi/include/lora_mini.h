#ifndef LORA_MINI_H
#define LORA_MINI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmStatus {
  LM_STATUS_OK = 0,
  LM_STATUS_NULL_POINTER = 1,
  LM_STATUS_SHAPE = 2,
  LM_STATUS_CONFIG = 3,
  LM_STATUS_IO = 4,
  LM_STATUS_FORMAT = 5,
  LM_STATUS_NUMERIC = 6,
  LM_STATUS_PANIC = 7,
} LmStatus;

/**
 * Values accepted for `method` arguments.
 */
typedef enum LmMethod {
  LM_METHOD_LORA = 0,
  LM_METHOD_LORA_MINI = 1,
  LM_METHOD_FFT = 2,
} LmMethod;

/**
 * Values accepted for `target` arguments.
 */
typedef enum LmTarget {
  LM_TARGET_DENSE_ONLY = 0,
  LM_TARGET_DENSE_AND_ATTENTION = 1,
  LM_TARGET_ALL = 2,
} LmTarget;

/**
 * A base weight with one attached adapter.
 */
typedef struct LmAdapter LmAdapter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *lm_last_error(void);

/**
 * Creates an adapter over a `d x k` base weight (`bias` may be NULL for a
 * zero bias of length `k`). `method` is an [`LmMethod`]; `a` and `b` are
 * ignored for LoRA. Factors are drawn deterministically from `seed`; with
 * `zero_init_b` the up factor starts at zero so the update is initially zero.
 *
 * # Safety
 * `weight` must point to `d * k` doubles, `bias` to `k` doubles or be NULL,
 * and `out` must be a valid pointer to write the handle to.
 */
enum LmStatus lm_adapter_new(const double *weight,
                             const double *bias,
                             size_t d,
                             size_t k,
                             uint32_t method,
                             size_t r,
                             size_t a,
                             size_t b,
                             double scale,
                             bool zero_init_b,
                             uint64_t seed,
                             struct LmAdapter **out);

/**
 * Releases a handle. NULL is accepted.
 *
 * # Safety
 * `handle` must come from this library and not be used afterwards.
 */
void lm_adapter_free(struct LmAdapter *handle);

/**
 * `rows x k` output of `x·(W + ΔW) + bias` for a `rows x d` input.
 *
 * # Safety
 * `handle` must be live, `x` must hold `rows * d` doubles and `out` must
 * hold `out_len` doubles.
 */
enum LmStatus lm_adapter_forward(const struct LmAdapter *handle,
                                 const double *x,
                                 size_t rows,
                                 double *out,
                                 size_t out_len);

/**
 * Writes the `d x k` adapter update.
 *
 * # Safety
 * `handle` must be live and `out` must hold `out_len` doubles.
 */
enum LmStatus lm_adapter_delta_weight(const struct LmAdapter *handle, double *out, size_t out_len);

/**
 * Writes `W + ΔW` without modifying the handle.
 *
 * # Safety
 * `handle` must be live and `out` must hold `out_len` doubles.
 */
enum LmStatus lm_adapter_merged_weight(const struct LmAdapter *handle, double *out, size_t out_len);

/**
 * # Safety
 * `handle` must be live and `out` writable.
 */
enum LmStatus lm_adapter_trainable_param_count(const struct LmAdapter *handle, size_t *out);

/**
 * Saves the adapter as a 32-bit checkpoint at `path`.
 *
 * # Safety
 * `handle` must be live and `path` a NUL-terminated UTF-8 string.
 */
enum LmStatus lm_adapter_save(const struct LmAdapter *handle, const char *path);

/**
 * Loads a single-adapter checkpoint and attaches it to a `d x k` base
 * weight (`bias` may be NULL).
 *
 * # Safety
 * As for [`lm_adapter_new`]; `path` must be a NUL-terminated UTF-8 string.
 */
enum LmStatus lm_adapter_load(const char *path,
                              const double *weight,
                              const double *bias,
                              size_t d,
                              size_t k,
                              struct LmAdapter **out);

/**
 * Trainable parameter count for a built-in topology fixture (`"roberta"`,
 * `"bert-stsb"`, `"t5-base"`, ...). `method` is an [`LmMethod`], `target` an
 * [`LmTarget`].
 *
 * # Safety
 * `fixture` must be a NUL-terminated string and `out` writable.
 */
enum LmStatus lm_budget(const char *fixture,
                        uint32_t method,
                        uint32_t target,
                        uint64_t r,
                        uint64_t a,
                        uint64_t b,
                        uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LORA_MINI_H */
