#ifndef MV2MAE_H
#define MV2MAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Mv2maeStatus {
  MV2MAE_STATUS_OK = 0,
  MV2MAE_STATUS_NULL_POINTER = 1,
  MV2MAE_STATUS_INVALID_ARGUMENT = 2,
  MV2MAE_STATUS_CONFIG = 3,
  MV2MAE_STATUS_IO = 4,
  MV2MAE_STATUS_FORMAT = 5,
  MV2MAE_STATUS_BUFFER_TOO_SMALL = 6,
  MV2MAE_STATUS_INTERNAL = 7,
} Mv2maeStatus;

/**
 * Opaque dataset handle.
 */
typedef struct Mv2maeDataset Mv2maeDataset;

/**
 * Opaque model handle holding a classifier checkpoint.
 */
typedef struct Mv2maeModel Mv2maeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The pointer
 * stays valid until the next failing call on this thread.
 */
const char *mv2mae_last_error_message(void);

/**
 * Renders a dataset with uniform class frequencies and writes it to `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum Mv2maeStatus mv2mae_dataset_generate(uint64_t seed,
                                          size_t n_samples,
                                          size_t n_views,
                                          size_t n_classes,
                                          size_t frames,
                                          size_t size,
                                          const char *path);

/**
 * Reads a dataset file. Free the handle with [`mv2mae_dataset_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum Mv2maeStatus mv2mae_dataset_open(const char *path, struct Mv2maeDataset **out);

/**
 * # Safety
 * `ds` must come from [`mv2mae_dataset_open`] and not be used afterwards.
 */
void mv2mae_dataset_free(struct Mv2maeDataset *ds);

/**
 * Sample and view counts plus the `[channels, frames, height, width]` of each clip.
 *
 * # Safety
 * `ds` must be a live handle; the output pointers may be null.
 */
enum Mv2maeStatus mv2mae_dataset_shape(const struct Mv2maeDataset *ds,
                                       size_t *n_samples,
                                       size_t *n_views,
                                       size_t *dims);

/**
 * # Safety
 * `ds` must be a live handle and `label` a valid pointer.
 */
enum Mv2maeStatus mv2mae_dataset_label(const struct Mv2maeDataset *ds,
                                       size_t sample,
                                       uint32_t *label);

/**
 * Motion weights of one view over the longest prefix of frames that the
 * temporal patch size divides. Writes one weight per token into `out` and the count
 * into `written`.
 *
 * # Safety
 * `ds` must be a live handle, `out` must hold `len` doubles, `written` may be null.
 */
enum Mv2maeStatus mv2mae_motion_weights(const struct Mv2maeDataset *ds,
                                        size_t sample,
                                        size_t view,
                                        size_t patch_t,
                                        size_t patch_h,
                                        size_t patch_w,
                                        double temperature,
                                        double *out,
                                        size_t len,
                                        size_t *written);

/**
 * Loads a fine-tuned checkpoint. Free with [`mv2mae_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum Mv2maeStatus mv2mae_model_load(const char *path, struct Mv2maeModel **out);

/**
 * # Safety
 * `m` must come from [`mv2mae_model_load`] and not be used afterwards.
 */
void mv2mae_model_free(struct Mv2maeModel *m);

/**
 * # Safety
 * `m` must be a live handle and `n` a valid pointer.
 */
enum Mv2maeStatus mv2mae_model_num_classes(const struct Mv2maeModel *m, size_t *n);

/**
 * Logits for one sample from a single full-frame clip of each listed view,
 * averaged over the views. Writes `n_classes` values into `out`.
 *
 * # Safety
 * `m` and `ds` must be live handles, `views` must hold `n_views` entries and
 * `out` must hold `len` doubles.
 */
enum Mv2maeStatus mv2mae_model_classify(const struct Mv2maeModel *m,
                                        const struct Mv2maeDataset *ds,
                                        size_t sample,
                                        const size_t *views,
                                        size_t n_views,
                                        double *out,
                                        size_t len);

/**
 * Mean of `n_views` logit rows of `n_classes` each, laid out row-major in
 * `logits`. Writes the fused row to `out` and its argmax to `prediction`.
 *
 * # Safety
 * `logits` must hold `n_views * n_classes` doubles, `out` `n_classes`;
 * `prediction` may be null.
 */
enum Mv2maeStatus mv2mae_late_fuse(const double *logits,
                                   size_t n_views,
                                   size_t n_classes,
                                   double *out,
                                   size_t *prediction);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MV2MAE_H */
