#ifndef CJCRF_H
#define CJCRF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CjcrfStatus {
  CJCRF_STATUS_OK = 0,
  CJCRF_STATUS_NULL_ARGUMENT = 1,
  CJCRF_STATUS_INVALID_ARGUMENT = 2,
  CJCRF_STATUS_IO = 3,
  CJCRF_STATUS_MODEL_FORMAT = 4,
  CJCRF_STATUS_DIMENSION_MISMATCH = 5,
  CJCRF_STATUS_INTERNAL = 6,
} CjcrfStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct CjcrfModel CjcrfModel;

/**
 * Face box in image pixels.
 */
typedef struct CjcrfBox {
  double left;
  double top;
  double width;
  double height;
} CjcrfBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file and stores a new handle in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer to
 * writable storage for one handle pointer.
 */
enum CjcrfStatus cjcrf_model_load(const char *path, struct CjcrfModel **out);

/**
 * Releases a handle returned by [`cjcrf_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle that has not been freed yet.
 */
void cjcrf_model_free(struct CjcrfModel *model);

/**
 * Number of landmarks the model predicts, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cjcrf_model_landmark_count(const struct CjcrfModel *model);

/**
 * Number of action units the model predicts, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cjcrf_model_au_count(const struct CjcrfModel *model);

/**
 * Number of cascade stages, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t cjcrf_model_stage_count(const struct CjcrfModel *model);

/**
 * Detects landmarks and AU probabilities in an 8-bit grayscale image.
 *
 * `pixels` holds `height` rows of `stride` bytes, of which the first `width`
 * are used. `landmarks_out` receives `2 * landmark_count` values
 * (`x0, y0, x1, y1, …` in pixels) and `probs_out` receives `au_count`
 * probabilities. When `labels_out` is non-null it receives `au_count`
 * bytes, 1 where the probability is at least `threshold`.
 *
 * # Safety
 * `model` must be a live handle; `pixels` must point to `stride * height`
 * readable bytes; the output buffers must be writable for the lengths above.
 */
enum CjcrfStatus cjcrf_detect(const struct CjcrfModel *model,
                              const uint8_t *pixels,
                              size_t width,
                              size_t height,
                              size_t stride,
                              struct CjcrfBox face_box,
                              double threshold,
                              double *landmarks_out,
                              double *probs_out,
                              uint8_t *labels_out);

/**
 * Message for the most recent failure on this thread, or null when the last
 * call succeeded. The pointer stays valid until the next call into this
 * library on the same thread.
 */
const char *cjcrf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cjcrf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CJCRF_H */
