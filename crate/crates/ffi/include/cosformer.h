#ifndef COSFORMER_H
#define COSFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum CosStatus {
  COS_STATUS_OK = 0,
  COS_STATUS_NULL_POINTER = 1,
  COS_STATUS_INVALID_ARGUMENT = 2,
  COS_STATUS_IO = 3,
  COS_STATUS_FORMAT = 4,
  COS_STATUS_NUMERIC = 5,
  COS_STATUS_CONTRACT = 6,
  COS_STATUS_BUFFER_TOO_SMALL = 7,
  COS_STATUS_PANIC = 8,
} CosStatus;

/**
 * Opaque handle to a model restored from a checkpoint.
 */
typedef struct CosModel CosModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf`.
 *
 * # Safety
 * `buf` must be valid for `cap` bytes; `needed` may be null.
 */
enum CosStatus cos_last_error(char *buf, size_t cap, size_t *needed);

/**
 * Loads a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CosStatus cos_model_load(const char *path, struct CosModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`cos_model_load`] and not be used afterwards.
 */
void cos_model_free(struct CosModel *model);

/**
 * Patch feature width the model expects.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CosStatus cos_model_feature_dim(const struct CosModel *model, size_t *out);

/**
 * Number of tasks the model has learned.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CosStatus cos_model_task_count(const struct CosModel *model, size_t *out);

/**
 * Vocabulary size, special tokens included.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum CosStatus cos_model_vocab_size(const struct CosModel *model, size_t *out);

/**
 * Writes the word with token id `id` into `buf` as a C string.
 *
 * # Safety
 * `model` must be a live handle; `buf` must be valid for `cap` bytes;
 * `needed` may be null.
 */
enum CosStatus cos_model_word(const struct CosModel *model,
                              size_t id,
                              char *buf,
                              size_t cap,
                              size_t *needed);

/**
 * Predicts the label of a bag given as `rows x cols` row-major patches.
 *
 * A non-negative `task` predicts within that task; a negative `task`
 * predicts over every class learned so far. Up to `cap` token ids are
 * written to `tokens`; `len` receives the full count and `truncated` is
 * set when decoding hit its length limit.
 *
 * # Safety
 * `patches` must hold `rows * cols` values; `tokens` must be valid for
 * `cap` entries; `len` must be writable; `truncated` may be null.
 */
enum CosStatus cos_model_predict(const struct CosModel *model,
                                 const double *patches,
                                 size_t rows,
                                 size_t cols,
                                 int64_t task,
                                 size_t *tokens,
                                 size_t cap,
                                 size_t *len,
                                 bool *truncated);

/**
 * Writes the bag's head-input representation. `len` receives its width.
 *
 * # Safety
 * As for [`cos_model_predict`], with `out` valid for `cap` values.
 */
enum CosStatus cos_model_embedding(const struct CosModel *model,
                                   const double *patches,
                                   size_t rows,
                                   size_t cols,
                                   int64_t task,
                                   double *out,
                                   size_t cap,
                                   size_t *len);

/**
 * Mean silhouette of `n` points of width `dim` (row-major) under `labels`.
 *
 * # Safety
 * `points` must hold `n * dim` values and `labels` `n` entries.
 */
enum CosStatus cos_silhouette(const double *points,
                              size_t n,
                              size_t dim,
                              const size_t *labels,
                              double *out);

/**
 * Average accuracy and forgetting from a `stages x stages` row-major
 * accuracy matrix; entries above the diagonal are ignored. `forgetting`
 * receives `stages - 1` values.
 *
 * # Safety
 * `matrix` must hold `stages * stages` values; `forgetting` must be valid
 * for `stages - 1` values when `stages > 1`.
 */
enum CosStatus cos_metrics(const double *matrix,
                           size_t stages,
                           double *average,
                           double *forgetting);

/**
 * Generates a synthetic stream into `out_dir`. `config_json` holds a
 * stream configuration; null or missing fields take their defaults.
 *
 * # Safety
 * Both strings must be NUL-terminated when non-null.
 */
enum CosStatus cos_stream_generate(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COSFORMER_H */
