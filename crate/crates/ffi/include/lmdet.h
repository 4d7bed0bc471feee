#ifndef LMDET_H
#define LMDET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmdetStatus {
  LMDET_STATUS_OK = 0,
  LMDET_STATUS_NULL_POINTER = 1,
  LMDET_STATUS_INVALID_ARGUMENT = 2,
  LMDET_STATUS_CONFIG = 3,
  LMDET_STATUS_IO = 4,
  LMDET_STATUS_DIMENSION = 5,
  LMDET_STATUS_NUMERICAL = 6,
  LMDET_STATUS_DEGENERATE_NORMALIZATION = 7,
  LMDET_STATUS_INTERNAL = 8,
} LmdetStatus;

/**
 * A loaded checkpoint.
 */
typedef struct LmdetModel LmdetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on this thread.
 */
const char *lmdet_last_error(void);

/**
 * Loads the checkpoint directory `path` at its stored precision.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum LmdetStatus lmdet_model_load(const char *path, struct LmdetModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`lmdet_model_load`] and not be used afterwards.
 */
void lmdet_model_free(struct LmdetModel *model);

/**
 * Landmark count N, image side and channel count of the model. Any output
 * pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum LmdetStatus lmdet_model_shape(const struct LmdetModel *model,
                                   size_t *num_landmarks,
                                   size_t *image_size,
                                   size_t *in_channels);

/**
 * Predicts landmarks for one image.
 *
 * `pixels` holds `in_channels · image_size²` values, channel-major then
 * row-major. `out` receives `2N` values `x0, y0, x1, y1, …` as fractions of
 * the image side.
 *
 * # Safety
 * `pixels` must be readable for `pixel_count` floats and `out` writable for
 * `out_len` doubles.
 */
enum LmdetStatus lmdet_model_predict(const struct LmdetModel *model,
                                     const float *pixels,
                                     size_t pixel_count,
                                     double *out,
                                     size_t out_len);

/**
 * Normalized mean error of `pred` against `gt` (each `2N` values
 * `x0, y0, …`), divided by the distance between ground-truth landmarks
 * `left_eye` and `right_eye`. Written to `out` as a fraction, not percent.
 *
 * # Safety
 * `pred` and `gt` must be readable for `2 · num_landmarks` doubles and `out`
 * writable.
 */
enum LmdetStatus lmdet_nme(const double *pred,
                           const double *gt,
                           size_t num_landmarks,
                           size_t left_eye,
                           size_t right_eye,
                           double *out);

/**
 * Library version as a static nul-terminated string.
 */
const char *lmdet_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMDET_H */
