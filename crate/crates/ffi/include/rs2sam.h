#ifndef RS2SAM_H
#define RS2SAM_H

#include <stddef.h>
#include <stdint.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum Rs2Status {
  RS2_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  RS2_STATUS_NULL_POINTER = 1,
  RS2_STATUS_INVALID_INPUT = 2,
  RS2_STATUS_CONFIG = 3,
  RS2_STATUS_IO = 4,
  RS2_STATUS_FORMAT = 5,
  RS2_STATUS_INTERNAL = 6,
} Rs2Status;

/**
 * Opaque model handle.
 */
typedef struct Rs2Model Rs2Model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *rs2_last_error(void);

/**
 * Create a freshly initialized model. `config_text` holds `key = value`
 * lines and may be null for the defaults.
 *
 * # Safety
 * `config_text` must be null or a nul-terminated string; `out` must be a
 * valid pointer.
 */
enum Rs2Status rs2_model_new(const char *config_text, struct Rs2Model **out);

/**
 * Load a trained model from a checkpoint file.
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be a valid pointer.
 */
enum Rs2Status rs2_model_load(const char *path, struct Rs2Model **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not freed before.
 */
void rs2_model_free(struct Rs2Model *model);

/**
 * Input image size the model expects.
 *
 * # Safety
 * All pointers must be valid.
 */
enum Rs2Status rs2_model_image_size(const struct Rs2Model *model, size_t *height, size_t *width);

/**
 * Segment the object described by `expression` in an interleaved RGB
 * image. Writes `height * width` values in {0, 1} to `mask_out`.
 *
 * # Safety
 * `rgb` must hold `height * width * 3` bytes, `mask_out` `height * width`
 * bytes, and `expression` must be a nul-terminated string.
 */
enum Rs2Status rs2_model_predict(const struct Rs2Model *model,
                                 const uint8_t *rgb,
                                 size_t height,
                                 size_t width,
                                 const char *expression,
                                 uint8_t *mask_out);

/**
 * Intersection over union of two binary masks of `n` values in {0, 1}.
 *
 * # Safety
 * `pred` and `gt` must hold `n` bytes; `out` must be valid.
 */
enum Rs2Status rs2_iou(const uint8_t *pred, const uint8_t *gt, size_t n, double *out);

/**
 * Dataset metrics over `count` mask pairs of `pixels` values each, stored
 * back to back. Writes Pr@0.5, Pr@0.6, Pr@0.7, Pr@0.8, Pr@0.9, oIoU and
 * mIoU (percentages) to `out[0..7]`.
 *
 * # Safety
 * `preds` and `gts` must hold `count * pixels` bytes; `out` must hold 7
 * doubles.
 */
enum Rs2Status rs2_evaluate(const uint8_t *preds,
                            const uint8_t *gts,
                            size_t count,
                            size_t pixels,
                            double *out);

/**
 * Write `n` synthetic samples (seeds `seed..seed + n`) with the default
 * generator settings to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a nul-terminated string.
 */
enum Rs2Status rs2_synth_dataset(const char *out_dir, size_t n, uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RS2SAM_H */
