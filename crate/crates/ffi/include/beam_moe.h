#ifndef BEAM_MOE_H
#define BEAM_MOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  BM_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BM_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument, shape mismatch or invalid value.
   */
  BM_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File missing, unreadable or malformed.
   */
  BM_STATUS_IO = 3,
  /**
   * A computation produced a non-finite value.
   */
  BM_STATUS_NUMERIC = 4,
  /**
   * Caller buffer too small. Query sizes with `bm_model_num_beams`,
   * `bm_model_num_experts` or `bm_dataset_input_dim`.
   */
  BM_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * Internal bug. The handle involved should be considered unusable.
   */
  BM_STATUS_PANIC = 6,
} BmStatus;

/**
 * Opaque dataset handle.
 */
typedef struct BmDataset BmDataset;

/**
 * Opaque handle to a model restored from a checkpoint.
 */
typedef struct BmModel BmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bm_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call or [`bm_clear_error`] on the same
 * thread.
 */
const char *bm_last_error_message(void);

void bm_clear_error(void);

/**
 * Loads a dataset file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
BmStatus bm_dataset_load(const char *path, BmDataset **out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` must come from [`bm_dataset_load`] and not be used afterwards.
 */
void bm_dataset_free(BmDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle and `len` a valid pointer.
 */
BmStatus bm_dataset_len(const BmDataset *ds, size_t *len);

/**
 * Total input width: the sum of all modality dimensions.
 *
 * # Safety
 * `ds` must be a live handle and `dim` a valid pointer.
 */
BmStatus bm_dataset_input_dim(const BmDataset *ds, size_t *dim);

/**
 * # Safety
 * `ds` must be a live handle and `num_beams` a valid pointer.
 */
BmStatus bm_dataset_num_beams(const BmDataset *ds, size_t *num_beams);

/**
 * Copies sample `index`'s modality inputs, concatenated in modality order,
 * into `input` (capacity `cap`) and its beam label into `label`. Either
 * output may be null.
 *
 * # Safety
 * `ds` must be a live handle; non-null outputs must be valid for writes.
 */
BmStatus bm_dataset_sample(const BmDataset *ds,
                           size_t index,
                           double *input,
                           size_t cap,
                           size_t *label);

/**
 * Loads a checkpoint. On success `*out` owns a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
BmStatus bm_model_load(const char *path, BmModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`bm_model_load`] and not be used afterwards.
 */
void bm_model_free(BmModel *model);

/**
 * # Safety
 * `model` must be a live handle and `num_beams` a valid pointer.
 */
BmStatus bm_model_num_beams(const BmModel *model, size_t *num_beams);

/**
 * Input width the model expects: the sum of its modality dimensions.
 *
 * # Safety
 * `model` must be a live handle and `dim` a valid pointer.
 */
BmStatus bm_model_input_dim(const BmModel *model, size_t *dim);

/**
 * Number of fusion weights the model produces: the expert count for a
 * mixture model, 0 for every other kind.
 *
 * # Safety
 * `model` must be a live handle and `count` a valid pointer.
 */
BmStatus bm_model_num_experts(const BmModel *model, size_t *count);

/**
 * Runs the model on one concatenated input. Writes the `num_beams` logits
 * into `logits` (capacity `cap`) and the predicted beam into `beam`; either
 * output may be null.
 *
 * # Safety
 * `model` must be a live handle, `input` valid for `input_len` reads, and
 * non-null outputs valid for writes.
 */
BmStatus bm_model_predict(const BmModel *model,
                          const double *input,
                          size_t input_len,
                          double *logits,
                          size_t cap,
                          size_t *beam);

/**
 * Fusion weights of a mixture model for one input, one per expert.
 *
 * # Safety
 * As for [`bm_model_predict`]; `weights` must hold `cap` values.
 */
BmStatus bm_model_gating_weights(const BmModel *model,
                                 const double *input,
                                 size_t input_len,
                                 double *weights,
                                 size_t cap);

/**
 * Exhaustive-search beam for a channel `h = re + j*im` of `num_antennas`
 * entries over the `num_beams`-point DFT codebook of a half-wavelength array.
 *
 * # Safety
 * `re` and `im` must each be valid for `num_antennas` reads; `beam` must be
 * a valid pointer.
 */
BmStatus bm_optimal_beam(const double *re,
                         const double *im,
                         size_t num_antennas,
                         size_t num_beams,
                         size_t *beam);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEAM_MOE_H */
