#ifndef BLURNET_H
#define BLURNET_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum BlurnetStatus {
  BLURNET_STATUS_OK = 0,
  BLURNET_STATUS_NULL_POINTER = 1,
  BLURNET_STATUS_INVALID_ARGUMENT = 2,
  BLURNET_STATUS_IO = 3,
  BLURNET_STATUS_BAD_FORMAT = 4,
  BLURNET_STATUS_SHAPE_MISMATCH = 5,
  BLURNET_STATUS_INSUFFICIENT_TEXTURE = 6,
  BLURNET_STATUS_BUFFER_TOO_SMALL = 7,
  BLURNET_STATUS_INTERNAL = 8,
} BlurnetStatus;

/**
 * Prior used by [`blurnet_deconvolve`].
 */
typedef enum BlurnetPrior {
  BLURNET_PRIOR_L2 = 0,
  BLURNET_PRIOR_HYPER_LAPLACIAN = 1,
} BlurnetPrior;

/**
 * Trained network weights.
 */
typedef struct BlurnetWeights BlurnetWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the thread.
 */
const char *blurnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *blurnet_version(void);

/**
 * Loads a weights file. On success `*out` owns a handle that must be
 * released with [`blurnet_weights_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BlurnetStatus blurnet_weights_load(const char *path, struct BlurnetWeights **out);

/**
 * Releases a handle from [`blurnet_weights_load`]. Null is ignored.
 *
 * # Safety
 * `w` must be null or a handle not yet freed.
 */
void blurnet_weights_free(struct BlurnetWeights *w);

/**
 * Computes the initial estimate of a blurry image by patch-wise
 * restoration at the given stride (1..=16). `out` receives
 * `width * height` values.
 *
 * # Safety
 * `y` and `out` must each hold `width * height` doubles; `w` must be a live handle.
 */
enum BlurnetStatus blurnet_restore(const struct BlurnetWeights *w,
                                   const double *y,
                                   size_t width,
                                   size_t height,
                                   size_t stride,
                                   double *out);

/**
 * Estimates the blur kernel relating a sharp estimate `x` to the blurry `y`
 * (both `width * height`) on a `support x support` canvas with default
 * settings. Writes `support^2` taps to `out` and the side length to `*out_size`.
 *
 * # Safety
 * `x` and `y` must hold `width * height` doubles, `out` `capacity` doubles.
 */
enum BlurnetStatus blurnet_estimate_kernel(const double *x,
                                           const double *y,
                                           size_t width,
                                           size_t height,
                                           size_t support,
                                           double *out,
                                           size_t capacity,
                                           size_t *out_size);

/**
 * Deconvolves `y` with a known `ksize x ksize` kernel. `iters` is the number
 * of outer iterations for the hyper-Laplacian prior (ignored for L2).
 *
 * # Safety
 * `y` and `out` must hold `width * height` doubles, `taps` `ksize^2` doubles.
 */
enum BlurnetStatus blurnet_deconvolve(const double *y,
                                      size_t width,
                                      size_t height,
                                      const double *taps,
                                      size_t ksize,
                                      enum BlurnetPrior prior,
                                      double sigma,
                                      double weight,
                                      size_t iters,
                                      double *out);

/**
 * Samples a random motion-blur kernel on a `canvas x canvas` grid from a
 * spline through control points on a `grid x grid` lattice.
 *
 * # Safety
 * `out` must hold `capacity` doubles and `out_size` be a valid pointer.
 */
enum BlurnetStatus blurnet_sample_kernel(uint64_t seed,
                                         size_t grid,
                                         size_t canvas,
                                         double *out,
                                         size_t capacity,
                                         size_t *out_size);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLURNET_H */
