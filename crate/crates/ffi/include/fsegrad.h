#ifndef FSEGRAD_H
#define FSEGRAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FsegStatus {
  FSEG_STATUS_OK = 0,
  FSEG_STATUS_NULL_POINTER = 1,
  FSEG_STATUS_INVALID_ARGUMENT = 2,
  FSEG_STATUS_DIMENSION_MISMATCH = 3,
  /**
   * The step completed but produced a non-finite value; the engine
   * should not be stepped further.
   */
  FSEG_STATUS_DIVERGENCE = 4,
  FSEG_STATUS_IO = 5,
  FSEG_STATUS_PANIC = 6,
} FsegStatus;

/**
 * Opaque engine handle.
 */
typedef struct FsegEngine FsegEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fseg_version(void);

/**
 * Message for the most recent failure on this thread, or NULL.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *fseg_last_error_message(void);

/**
 * Creates an engine for the named cell.
 *
 * `hidden` lists `n_hidden` hidden widths. `params` may be NULL, in which
 * case parameters are drawn from `seed`; otherwise it must hold
 * `params_len` values matching the cell. The recurrent state starts at
 * zero. With `update_params` nonzero each step applies SGD with rate `eta`
 * on the squared-error loss.
 *
 * # Safety
 * Pointer arguments must be NULL or valid for the stated lengths, and
 * `out_engine` must be writable.
 */
enum FsegStatus fseg_engine_new(const char *cell_name,
                                size_t input_dim,
                                const size_t *hidden,
                                size_t n_hidden,
                                size_t output_dim,
                                uint64_t seed,
                                const double *params,
                                size_t params_len,
                                double eta,
                                bool update_params,
                                double attenuation,
                                struct FsegEngine **out_engine);

/**
 * Releases an engine. NULL is ignored.
 *
 * # Safety
 * `engine` must come from [`fseg_engine_new`] and not be used afterwards.
 */
void fseg_engine_free(struct FsegEngine *engine);

/**
 * # Safety
 * `engine` must be NULL or a live handle.
 */
size_t fseg_engine_input_dim(const struct FsegEngine *engine);

/**
 * # Safety
 * `engine` must be NULL or a live handle.
 */
size_t fseg_engine_output_dim(const struct FsegEngine *engine);

/**
 * # Safety
 * `engine` must be NULL or a live handle.
 */
size_t fseg_engine_param_dim(const struct FsegEngine *engine);

/**
 * Copies the current parameters into `out` (exactly `param_dim` values).
 *
 * # Safety
 * `engine` must be a live handle and `out` writable for `out_len` doubles.
 */
enum FsegStatus fseg_engine_get_params(const struct FsegEngine *engine,
                                       double *out,
                                       size_t out_len);

/**
 * Advances one step on input `x` against `target`.
 *
 * Writes the loss to `out_loss` and, when `out_output` is non-NULL, the
 * cell output (`output_dim` values). The gradient `dY_N/dP` of this step is
 * then available from [`fseg_engine_gradient`].
 *
 * # Safety
 * `engine` must be a live handle; buffers must be valid for their lengths.
 */
enum FsegStatus fseg_engine_step(struct FsegEngine *engine,
                                 const double *x,
                                 size_t x_len,
                                 const double *target,
                                 size_t target_len,
                                 double *out_loss,
                                 double *out_output,
                                 size_t out_output_len);

/**
 * Copies the latest `dY_N/dP` (`output_dim x param_dim`, row-major).
 *
 * # Safety
 * `engine` must be a live handle and `out` writable for `out_len` doubles.
 */
enum FsegStatus fseg_engine_gradient(const struct FsegEngine *engine, double *out, size_t out_len);

/**
 * Frobenius norm of the carried sensitivity, or NaN for a NULL handle.
 *
 * # Safety
 * `engine` must be NULL or a live handle.
 */
double fseg_engine_delta_norm(const struct FsegEngine *engine);

/**
 * Runs an experiment from `key = value` configuration text (the same
 * format the command-line tool reads) and writes its CSV and JSON files.
 *
 * `out_exit_code`, when non-NULL, receives 0 for a completed run or 2 on
 * divergence.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out_exit_code` NULL or
 * writable.
 */
enum FsegStatus fseg_run_config(const char *config_text, int32_t *out_exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FSEGRAD_H */
