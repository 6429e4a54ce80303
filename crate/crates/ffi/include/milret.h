#ifndef MILRET_H
#define MILRET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MilretStatus {
  MILRET_STATUS_OK = 0,
  MILRET_STATUS_NULL_POINTER = 1,
  MILRET_STATUS_INVALID_ARGUMENT = 2,
  MILRET_STATUS_FORMAT = 3,
  MILRET_STATUS_IO = 4,
  MILRET_STATUS_NOT_FOUND = 5,
  MILRET_STATUS_OPTIMIZATION = 6,
  MILRET_STATUS_PANIC = 7,
} MilretStatus;

typedef enum MilretModality {
  MILRET_MODALITY_IMAGE = 0,
  MILRET_MODALITY_TEXT = 1,
} MilretModality;

typedef enum MilretLoss {
  MILRET_LOSS_CLIP = 0,
  MILRET_LOSS_MIL_MAX = 1,
  MILRET_LOSS_MIL_SOFTMAX = 2,
  MILRET_LOSS_MIL_NCE = 3,
} MilretLoss;

/**
 * Opaque adapter model.
 */
typedef struct MilretModel MilretModel;

/**
 * Opaque embedding store.
 */
typedef struct MilretStore MilretStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *milret_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *milret_version(void);

/**
 * Read an embedding file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MilretStatus milret_store_read(const char *path, struct MilretStore **out);

/**
 * Build a store from `count` ids and a row-major `count × dim` matrix.
 *
 * # Safety
 * `ids` must hold `count` NUL-terminated strings, `rows` `count * dim`
 * floats, and `out` must be valid.
 */
enum MilretStatus milret_store_new(enum MilretModality modality,
                                   size_t dim,
                                   size_t count,
                                   const char *const *ids,
                                   const float *rows,
                                   struct MilretStore **out);

/**
 * Write a store to `path`.
 *
 * # Safety
 * `store` must come from this library; `path` must be NUL-terminated.
 */
enum MilretStatus milret_store_write(const struct MilretStore *store, const char *path);

/**
 * Number of rows, or 0 for a null handle.
 *
 * # Safety
 * `store` must be null or come from this library.
 */
size_t milret_store_len(const struct MilretStore *store);

/**
 * Row dimension, or 0 for a null handle.
 *
 * # Safety
 * `store` must be null or come from this library.
 */
size_t milret_store_dim(const struct MilretStore *store);

/**
 * Copy the row for `id` into `out` (`dim` floats).
 *
 * # Safety
 * `store` must come from this library, `id` must be NUL-terminated and
 * `out` must hold `dim` floats.
 */
enum MilretStatus milret_store_get(const struct MilretStore *store,
                                   const char *id,
                                   float *out,
                                   size_t dim);

/**
 * # Safety
 * `store` must be null or come from this library, and not be used again.
 */
void milret_store_free(struct MilretStore *store);

/**
 * Load an adapter checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum MilretStatus milret_model_read(const char *path, struct MilretModel **out);

/**
 * Identity adapter of dimension `dim`.
 *
 * # Safety
 * `out` must be valid.
 */
enum MilretStatus milret_model_identity(size_t dim, double sigma, struct MilretModel **out);

/**
 * Embed one raw vector (`dim` values) through the image or text head;
 * the result is unit length.
 *
 * # Safety
 * `model` must come from this library; `input` and `out` must hold `dim`
 * doubles.
 */
enum MilretStatus milret_model_embed(const struct MilretModel *model,
                                     enum MilretModality modality,
                                     const double *input,
                                     double *out,
                                     size_t dim);

/**
 * Current temperature of the model, or NaN for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
double milret_model_sigma(const struct MilretModel *model);

/**
 * # Safety
 * `model` must be null or come from this library, and not be used again.
 */
void milret_model_free(struct MilretModel *model);

/**
 * Contrastive loss of a batch and its gradients.
 *
 * `images` is `batch × dim`; bag `i` owns texts `offsets[i]..offsets[i+1]`
 * of the `offsets[batch] × dim` matrix `texts`. Gradient outputs may be
 * null when not needed; otherwise they match the input shapes.
 *
 * # Safety
 * All non-null pointers must reference arrays of the documented sizes.
 */
enum MilretStatus milret_loss(enum MilretLoss kind,
                              double sigma,
                              double sigma_sm,
                              size_t batch,
                              size_t dim,
                              const double *images,
                              const double *texts,
                              const size_t *offsets,
                              double *out_value,
                              double *out_d_images,
                              double *out_d_texts,
                              double *out_d_sigma);

/**
 * Normalized cross-correlation of two 8-bit grayscale rasters after
 * resizing both to `side × side`.
 *
 * # Safety
 * `a` must hold `aw * ah` bytes, `b` `bw * bh` bytes, `out` be valid.
 */
enum MilretStatus milret_ncc(const uint8_t *a,
                             size_t aw,
                             size_t ah,
                             const uint8_t *b,
                             size_t bw,
                             size_t bh,
                             size_t side,
                             double *out);

/**
 * Recall@1/5/10 from per-query best-positive ranks (0-based; negative
 * for queries without a positive). Writes three doubles to `out`.
 *
 * # Safety
 * `ranks` must hold `n` values and `out` three doubles.
 */
enum MilretStatus milret_recall(const int64_t *ranks, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MILRET_H */
