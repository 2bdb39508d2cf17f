#ifndef GCL_H
#define GCL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum GclStatus {
  GCL_STATUS_OK = 0,
  GCL_STATUS_NULL_POINTER = 1,
  GCL_STATUS_INVALID_ARGUMENT = 2,
  GCL_STATUS_SHAPE_MISMATCH = 3,
  GCL_STATUS_ZERO_VECTOR = 4,
  GCL_STATUS_IO = 5,
  GCL_STATUS_FORMAT = 6,
  GCL_STATUS_NUMERIC = 7,
  GCL_STATUS_OUT_OF_RANGE = 8,
  GCL_STATUS_PANIC = 99,
} GclStatus;

/**
 * Modality tag for pool candidates.
 */
typedef enum GclModality {
  GCL_MODALITY_IMAGE = 0,
  GCL_MODALITY_TEXT = 1,
  GCL_MODALITY_FUSED = 2,
} GclModality;

/**
 * Aligned image, text and fused embeddings.
 */
typedef struct GclBatch GclBatch;

/**
 * Synthetic paired dataset.
 */
typedef struct GclDataset GclDataset;

/**
 * Candidate pool for top-k search.
 */
typedef struct GclPool GclPool;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next call into the library on this thread.
 */
const char *gcl_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *gcl_version(void);

/**
 * Generates a dataset with one pair per concept.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum GclStatus gcl_dataset_generate(size_t n_pairs,
                                    size_t k,
                                    size_t d_in,
                                    float sigma,
                                    uint64_t seed,
                                    struct GclDataset **out);

/**
 * Reads a dataset file (and its JSON sidecar).
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` writable.
 */
enum GclStatus gcl_dataset_read(const char *path, struct GclDataset **out);

/**
 * Writes a dataset file plus its JSON sidecar.
 *
 * # Safety
 * `ds` must be a live handle and `path` a nul-terminated string.
 */
enum GclStatus gcl_dataset_write(const struct GclDataset *ds, const char *path);

/**
 * Number of pairs, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t gcl_dataset_len(const struct GclDataset *ds);

/**
 * Feature width, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t gcl_dataset_dim(const struct GclDataset *ds);

/**
 * Copies pair `index` into caller buffers of `d_in` floats each. Any
 * output pointer may be null.
 *
 * # Safety
 * `ds` must be a live handle; non-null outputs must be writable.
 */
enum GclStatus gcl_dataset_pair(const struct GclDataset *ds,
                                size_t index,
                                uint32_t *concept_id,
                                float *x_img,
                                float *x_txt);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void gcl_dataset_free(struct GclDataset *ds);

/**
 * Builds a batch from `n x d` image and text embeddings. Rows are
 * normalized; the fused rows are their sum, renormalized when
 * `renormalize` is non-zero.
 *
 * # Safety
 * `images` and `texts` must each hold `n * d` doubles; `out` writable.
 */
enum GclStatus gcl_batch_new(const double *images,
                             const double *texts,
                             size_t n,
                             size_t d,
                             uint8_t renormalize,
                             struct GclBatch **out);

/**
 * Copies the fused rows (`n * d` doubles) into `out`.
 *
 * # Safety
 * `batch` must be a live handle and `out` hold `n * d` doubles.
 */
enum GclStatus gcl_batch_fused(const struct GclBatch *batch, double *out);

/**
 * # Safety
 * `batch` must be null or a handle not yet freed.
 */
void gcl_batch_free(struct GclBatch *batch);

/**
 * Evaluates a loss by name (`cl`, `gcl`, `gcl_ablation:<drop>`, `imsep`)
 * at temperature `tau`. Gradient buffers (`n * d` doubles each) may be
 * null when not needed.
 *
 * # Safety
 * `batch` must be a live handle, `variant` a nul-terminated string, and
 * non-null outputs writable with the stated sizes.
 */
enum GclStatus gcl_loss(const struct GclBatch *batch,
                        const char *variant,
                        double tau,
                        double *value,
                        double *grad_images,
                        double *grad_texts,
                        double *grad_fused);

/**
 * Builds a pool of `n` candidates with `d`-dimensional embeddings,
 * distinct `ids`, and per-candidate `modalities`.
 *
 * # Safety
 * `embeddings` must hold `n * d` doubles, `ids` and `modalities` `n`
 * entries each; `out` writable.
 */
enum GclStatus gcl_pool_new(const double *embeddings,
                            const uint64_t *ids,
                            const enum GclModality *modalities,
                            size_t n,
                            size_t d,
                            struct GclPool **out);

/**
 * Writes the ids of the `k` best candidates for `query` (length `d`) into
 * `out_ids`, best first. Ties go to the smaller id.
 *
 * # Safety
 * `pool` must be a live handle, `query` hold `d` doubles, `out_ids` `k`
 * entries.
 */
enum GclStatus gcl_pool_top_k(const struct GclPool *pool,
                              const double *query,
                              size_t d,
                              size_t k,
                              uint64_t *out_ids);

/**
 * # Safety
 * `pool` must be null or a handle not yet freed.
 */
void gcl_pool_free(struct GclPool *pool);

/**
 * Learning rate at `step` under linear warmup then cosine decay.
 *
 * # Safety
 * `out` must be writable.
 */
enum GclStatus gcl_lr_at(size_t step,
                         size_t warmup_steps,
                         size_t total_steps,
                         double base_lr,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GCL_H */
