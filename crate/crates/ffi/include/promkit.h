/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef PROMKIT_H
#define PROMKIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PromkitStatus {
  PROMKIT_STATUS_OK = 0,
  PROMKIT_STATUS_NULL_POINTER = 1,
  /**
   * Bad arguments, encodings or configuration.
   */
  PROMKIT_STATUS_INVALID_INPUT = 2,
  PROMKIT_STATUS_IO = 3,
  PROMKIT_STATUS_INFEASIBLE_DESIGN = 4,
  /**
   * The voxel could not be estimated (masked, degenerate covariance).
   */
  PROMKIT_STATUS_ESTIMATION = 5,
  PROMKIT_STATUS_PANIC = 6,
} PromkitStatus;

/**
 * Opaque estimator handle.
 */
typedef struct PromkitEstimator PromkitEstimator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static string.
 */
const char *promkit_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *promkit_last_error(void);

/**
 * Unambiguous range of a set of pairwise vencs.
 *
 * # Safety
 * `venc` must point to `n` doubles; `out` must be writable.
 */
enum PromkitStatus promkit_unambiguous_range(const double *venc, size_t n, double *out);

/**
 * Creates an estimator for the given first moments (`gamma m1`, s/cm).
 * `name` is one of prom, sdv, odv, nco, mle. A NaN `offset` selects the
 * default output interval `[-Omega/2, Omega/2)`.
 *
 * # Safety
 * `gamma_m1` must point to `num_encodings` doubles, `name` must be a nul
 * terminated string, and `out` must be writable.
 */
enum PromkitStatus promkit_estimator_new(const double *gamma_m1,
                                         size_t num_encodings,
                                         const char *name,
                                         double offset,
                                         struct PromkitEstimator **out);

/**
 * Releases an estimator. Null is ignored.
 *
 * # Safety
 * `est` must come from `promkit_estimator_new` and not be used afterwards.
 */
void promkit_estimator_free(struct PromkitEstimator *est);

/**
 * Unambiguous range and interval start of an estimator.
 *
 * # Safety
 * `est` must be a live handle; `omega` and `offset` must be writable.
 */
enum PromkitStatus promkit_estimator_range(const struct PromkitEstimator *est,
                                           double *omega,
                                           double *offset);

/**
 * Estimates one voxel. `data` holds `num_encodings * num_coils` complex
 * samples as interleaved `(re, im)` doubles, coil fastest.
 *
 * # Safety
 * `est` must be a live handle, `data` must point to
 * `2 * num_encodings * num_coils` doubles and `v` must be writable.
 */
enum PromkitStatus promkit_estimate_voxel(const struct PromkitEstimator *est,
                                          const double *data,
                                          size_t num_encodings,
                                          size_t num_coils,
                                          double *v);

/**
 * Estimates a whole image. `data` uses the container layout: interleaved
 * `(re, im)` floats, x fastest, then y, coil, encoding. `out` receives
 * `ny * nx` velocities, NaN where a voxel could not be estimated.
 *
 * # Safety
 * `est` must be a live handle, `data` must hold `2 * ne * nc * ny * nx`
 * floats and `out` must have room for `ny * nx` floats.
 */
enum PromkitStatus promkit_estimate_image(const struct PromkitEstimator *est,
                                          const float *data,
                                          size_t ne,
                                          size_t nc,
                                          size_t ny,
                                          size_t nx,
                                          float *out);

/**
 * Runs the three-point design. `spec_json` is a design spec as in the
 * `design` section of a run config. On success `*result_json` owns a
 * string to be released with `promkit_string_free`. On infeasible designs
 * the per-candidate reasons are in the last error.
 *
 * # Safety
 * `spec_json` must be a nul terminated string; `result_json` must be
 * writable.
 */
enum PromkitStatus promkit_design(const char *spec_json, char **result_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void promkit_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMKIT_H */
