#ifndef FAIRFOREST_H
#define FAIRFOREST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum FfStatus {
  FfStatus_Ok = 0,
  FfStatus_NullPointer = 1,
  FfStatus_InvalidConfig = 2,
  FfStatus_InvalidInput = 3,
  FfStatus_Numerical = 4,
  FfStatus_Serialization = 5,
  FfStatus_Panic = 6,
} FfStatus;

/**
 * Opaque learner handle.
 */
typedef struct FfLearner FfLearner;

/**
 * Running metrics; parity fields are NaN until both groups are observed.
 */
typedef struct FfMetrics {
  uint64_t steps;
  double accuracy;
  double dp_hard;
  double dp_soft;
} FfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a node-constrained demographic-parity learner and stores its
 * handle in `*out`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FfStatus ff_learner_new(uintptr_t dim,
                             uintptr_t classes,
                             uintptr_t height,
                             uintptr_t trees,
                             double lambda,
                             double delta,
                             uint64_t seed,
                             struct FfLearner **out);

/**
 * Restores a learner from a checkpoint produced by [`ff_learner_checkpoint`].
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` valid for one write.
 */
enum FfStatus ff_learner_from_checkpoint(const char *json, struct FfLearner **out);

/**
 * Predicts on `x`, then learns from `(y, a)`; the prediction made before the
 * update is written to `*pred`.
 *
 * # Safety
 * `handle` must come from this library; `x` must hold `len` doubles; `pred`
 * must be writable.
 */
enum FfStatus ff_learner_step(struct FfLearner *handle,
                              const double *x,
                              uintptr_t len,
                              uintptr_t y,
                              uintptr_t a,
                              uintptr_t *pred);

/**
 * Predicts without learning.
 *
 * # Safety
 * As for [`ff_learner_step`].
 */
enum FfStatus ff_learner_predict(const struct FfLearner *handle,
                                 const double *x,
                                 uintptr_t len,
                                 uintptr_t *pred);

/**
 * Writes the running metrics to `*out`.
 *
 * # Safety
 * `handle` must come from this library and `out` must be writable.
 */
enum FfStatus ff_learner_metrics(const struct FfLearner *handle, struct FfMetrics *out);

/**
 * Serializes the full learner state as JSON into `*out`; release it with
 * [`ff_string_free`].
 *
 * # Safety
 * `handle` must come from this library and `out` must be writable.
 */
enum FfStatus ff_learner_checkpoint(const struct FfLearner *handle, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ff_string_free(char *s);

/**
 * Releases a learner. Null is ignored.
 *
 * # Safety
 * `handle` must come from this library and not be freed twice.
 */
void ff_learner_free(struct FfLearner *handle);

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next call into the library on the same thread.
 */
const char *ff_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRFOREST_H */
