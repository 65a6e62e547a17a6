#ifndef FUSIONFORMER_H
#define FUSIONFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

enum FfStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  FF_STATUS_OK = 0,
  FF_STATUS_NULL_POINTER = 1,
  FF_STATUS_INVALID_ARGUMENT = 2,
  FF_STATUS_IO = 3,
  FF_STATUS_FORMAT = 4,
  FF_STATUS_FUSION = 5,
  FF_STATUS_DIMENSION = 6,
  FF_STATUS_DIVERGENCE = 7,
  FF_STATUS_BUFFER_TOO_SMALL = 8,
  FF_STATUS_PANIC = 9,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum FfStatus FfStatus;
#else
typedef int32_t FfStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque model handle.
 */
typedef struct FfModel FfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *ff_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ff_version(void);

/**
 * Builds a randomly initialized model with default feed-forward, kernel,
 * vocabulary and feature sizes.
 *
 * # Safety
 * `flavor` must be a NUL-terminated string and `out` a writable pointer.
 */
FfStatus ff_model_init(const char *flavor,
                       size_t encoder_blocks,
                       size_t decoder_blocks,
                       size_t hidden,
                       size_t heads,
                       uint64_t seed,
                       struct FfModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
FfStatus ff_model_load(const char *path, struct FfModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
FfStatus ff_model_save(const struct FfModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ff_model_free(struct FfModel *model);

/**
 * Total parameter count, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
uint64_t ff_model_param_count(const struct FfModel *model);

/**
 * Input feature width and hidden size of a model.
 *
 * # Safety
 * `model` must come from this library; output pointers must be writable.
 */
FfStatus ff_model_dims(const struct FfModel *model, size_t *feat_dim, size_t *hidden);

/**
 * Folds BatchNorm and ReLU into a new handle; the input is left untouched.
 *
 * # Safety
 * `model` must come from this library and `out` must be writable.
 */
FfStatus ff_model_fuse(const struct FfModel *model, struct FfModel **out);

/**
 * Runs the encoder on `frames` rows of `feat_dim` features (row-major).
 * `chunk_size` 0 means full context and `left_chunks` < 0 means unlimited
 * history. Writes `out_frames * hidden` values to `out`; when `capacity` is
 * too small nothing is written, `out_frames` still receives the row count
 * and `BufferTooSmall` is returned.
 *
 * # Safety
 * `features` must hold `frames * feat_dim` floats, `out` must hold
 * `capacity` floats, and `out_frames` must be writable.
 */
FfStatus ff_encoder_forward(const struct FfModel *model,
                            const float *features,
                            size_t frames,
                            size_t feat_dim,
                            size_t chunk_size,
                            int64_t left_chunks,
                            float *out,
                            size_t capacity,
                            size_t *out_frames);

/**
 * Learning rate of the warmup/decay schedule at `step`.
 *
 * # Safety
 * `out` must be writable.
 */
FfStatus ff_noam_lr(double peak, uint64_t warmup, uint64_t step, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUSIONFORMER_H */
