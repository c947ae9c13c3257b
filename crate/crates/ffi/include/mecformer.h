#ifndef MECFORMER_H
#define MECFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MecStatus {
  MEC_STATUS_OK = 0,
  MEC_STATUS_NULL_POINTER = 1,
  MEC_STATUS_INVALID_UTF8 = 2,
  MEC_STATUS_IO = 3,
  MEC_STATUS_FORMAT = 4,
  MEC_STATUS_CONFIG = 5,
  MEC_STATUS_CONTRACT = 6,
  MEC_STATUS_INCOMPATIBLE = 7,
  MEC_STATUS_SHAPE = 8,
  MEC_STATUS_BUFFER_TOO_SMALL = 9,
  MEC_STATUS_PANIC = 10,
  MEC_STATUS_OTHER = 11,
} MecStatus;

/**
 * A feature bag read from disk.
 */
typedef struct MecBag MecBag;

/**
 * A loaded checkpoint together with the task spec it was trained with.
 */
typedef struct MecModel MecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mec_last_error_message(void);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MecStatus mec_model_load(const char *path, struct MecModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`mec_model_load`] and not be used afterwards.
 */
void mec_model_free(struct MecModel *model);

/**
 * Feature width and task count of a model.
 *
 * # Safety
 * `model` must be a live handle; outputs may be null when not wanted.
 */
enum MecStatus mec_model_shape(const struct MecModel *model, size_t *d_f, size_t *tasks);

/**
 * Greedily decodes a bag of `n_patches × d_f` row-major features for task
 * `task` (zero-based). The term is written NUL-terminated to `term`; `*len`
 * receives its byte length even when the buffer is too small.
 *
 * # Safety
 * `features` must hold `n_patches * d_f` floats; `term` must hold `cap` bytes.
 */
enum MecStatus mec_model_generate(const struct MecModel *model,
                                  const float *features,
                                  size_t n_patches,
                                  size_t d_f,
                                  size_t task,
                                  char *term,
                                  size_t cap,
                                  size_t *len,
                                  bool *truncated);

/**
 * Reads a bag file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MecStatus mec_bag_read(const char *path, struct MecBag **out);

/**
 * # Safety
 * `bag` must come from [`mec_bag_read`] and not be used afterwards.
 */
void mec_bag_free(struct MecBag *bag);

/**
 * Shape, task and a borrowed pointer to the row-major features, valid while
 * the handle lives.
 *
 * # Safety
 * `bag` must be a live handle; outputs may be null when not wanted.
 */
enum MecStatus mec_bag_info(const struct MecBag *bag,
                            size_t *n_patches,
                            size_t *d_f,
                            size_t *task,
                            const float **features);

/**
 * Label term of a bag, written like [`mec_model_generate`]'s term.
 *
 * # Safety
 * `bag` must be a live handle; `term` must hold `cap` bytes.
 */
enum MecStatus mec_bag_label(const struct MecBag *bag, char *term, size_t cap, size_t *len);

/**
 * `Σ m_i / (n_c + n_ood)` over `n_c` per-category values.
 *
 * # Safety
 * `per_category` must hold `n_c` doubles.
 */
enum MecStatus mec_penalized_overall(const double *per_category,
                                     size_t n_c,
                                     size_t n_ood,
                                     double *out);

/**
 * Mean silhouette of `count` row-major points of width `dim`.
 *
 * # Safety
 * `points` must hold `count * dim` doubles and `labels` `count` values.
 */
enum MecStatus mec_silhouette(const double *points,
                              size_t count,
                              size_t dim,
                              const size_t *labels,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MECFORMER_H */
