#ifndef AVSEP_H
#define AVSEP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared with the command-line exit status.
 */
enum AvsepStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  AVSEP_STATUS_OK = 0,
  AVSEP_STATUS_INVALID_INPUT = 2,
  AVSEP_STATUS_CONFIG = 3,
  AVSEP_STATUS_FORMAT = 4,
  AVSEP_STATUS_DATA = 5,
  AVSEP_STATUS_VERSION = 6,
  AVSEP_STATUS_IO = 7,
  AVSEP_STATUS_NULL_POINTER = 8,
  AVSEP_STATUS_PANIC = 9,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum AvsepStatus AvsepStatus;
#else
typedef int32_t AvsepStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque separation model.
 */
typedef struct AvsepModel AvsepModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *avsep_last_error(void);

/**
 * Loads a checkpoint into a new model handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
AvsepStatus avsep_model_load(const char *path, struct AvsepModel **out);

/**
 * Releases a handle from [`avsep_model_load`]; null is ignored.
 *
 * # Safety
 * `model` must come from [`avsep_model_load`] and not be used afterwards.
 */
void avsep_model_free(struct AvsepModel *model);

/**
 * Total number of trainable parameters.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
AvsepStatus avsep_model_num_params(const struct AvsepModel *model, uint64_t *out);

/**
 * Sample rate the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
AvsepStatus avsep_model_sample_rate(const struct AvsepModel *model, uint32_t *out);

/**
 * Separates `mix` (`len` samples at `sample_rate`) into `n_speakers` streams.
 *
 * `visual` holds `n_visual` row-major tracks of `frames x dim` floats for the
 * guided speakers (may be null when `n_visual` is 0). `out` receives
 * `n_speakers * len` samples, guided streams first.
 *
 * # Safety
 * All pointers must reference buffers of the stated sizes.
 */
AvsepStatus avsep_model_separate(const struct AvsepModel *model,
                                 const double *mix,
                                 size_t len,
                                 uint32_t sample_rate,
                                 const float *visual,
                                 size_t n_visual,
                                 size_t frames,
                                 size_t dim,
                                 size_t n_speakers,
                                 double *out);

/**
 * SI-SDR in dB of `est` against `reference`, both `len` samples.
 *
 * # Safety
 * `est` and `reference` must hold `len` values and `out` must be valid.
 */
AvsepStatus avsep_si_sdr(const double *est, const double *reference, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AVSEP_H */
