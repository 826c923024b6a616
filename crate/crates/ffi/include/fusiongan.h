#ifndef FUSIONGAN_H
#define FUSIONGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_ARGUMENT = 2,
  FG_STATUS_IO = 3,
  FG_STATUS_NUMERICAL = 4,
  FG_STATUS_PANIC = 5,
} FgStatus;

/**
 * In-memory collection of identity sets.
 */
typedef struct FgDataset FgDataset;

/**
 * Loaded generator.
 */
typedef struct FgModel FgModel;

/**
 * A landmark as seen by C callers.
 */
typedef struct FgPoint {
  double x;
  double y;
  bool present;
} FgPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *fg_last_error(void);

/**
 * Loads a checkpoint and returns its generator in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FgStatus fg_model_load(const char *path, struct FgModel **out);

/**
 * Image side length the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a handle from [`fg_model_load`].
 */
size_t fg_model_resolution(const struct FgModel *model);

/**
 * Training iteration stored in the checkpoint, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a handle from [`fg_model_load`].
 */
uint64_t fg_model_iteration(const struct FgModel *model);

/**
 * Fuses the identity of `x` with the shape of `y`. All three buffers hold
 * `len = 3 * res * res` doubles.
 *
 * # Safety
 * `model` must come from [`fg_model_load`]; `x`, `y` and `out` must each point
 * to `len` doubles.
 */
enum FgStatus fg_model_fuse(const struct FgModel *model,
                            const double *x,
                            const double *y,
                            size_t len,
                            double *out);

/**
 * # Safety
 * `model` must be null or a handle from [`fg_model_load`] not yet freed.
 */
void fg_model_free(struct FgModel *model);

/**
 * Renders a synthetic dataset. With `holdout` set, the same identities are
 * rendered with instances disjoint from the training ones.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum FgStatus fg_dataset_generate(size_t n_sets,
                                  size_t n_per_set,
                                  size_t res,
                                  uint64_t seed,
                                  bool holdout,
                                  struct FgDataset **out);

/**
 * Loads a dataset directory (one sub-directory of PNGs per set).
 *
 * # Safety
 * `root` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FgStatus fg_dataset_load(const char *root, struct FgDataset **out);

/**
 * Writes the dataset as PNGs plus per-set `specs.json`.
 *
 * # Safety
 * `ds` must come from a dataset constructor; `root` must be NUL-terminated.
 */
enum FgStatus fg_dataset_save(const struct FgDataset *ds, const char *root);

/**
 * Number of sets, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t fg_dataset_num_sets(const struct FgDataset *ds);

/**
 * Number of images in set `set`, or 0 when out of range.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t fg_dataset_set_len(const struct FgDataset *ds, size_t set);

/**
 * Image side length, or 0 for a null or empty dataset.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t fg_dataset_resolution(const struct FgDataset *ds);

/**
 * Copies image `index` of set `set` into `out` (`len = 3 * res * res`).
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` must point to `len` doubles.
 */
enum FgStatus fg_dataset_image(const struct FgDataset *ds,
                               size_t set,
                               size_t index,
                               double *out,
                               size_t len);

/**
 * # Safety
 * `ds` must be null or a dataset handle not yet freed.
 */
void fg_dataset_free(struct FgDataset *ds);

/**
 * Keypoint similarity between `k` reference and `k` generated landmarks on a
 * `res x res` image, with the default tolerance and missed-point penalty.
 *
 * # Safety
 * `reference` and `generated` must each point to `k` points; `out` must be valid.
 */
enum FgStatus fg_modified_oks(const struct FgPoint *reference,
                              const struct FgPoint *generated,
                              size_t k,
                              size_t res,
                              double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FUSIONGAN_H */
