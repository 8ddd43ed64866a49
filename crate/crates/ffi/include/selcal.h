/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef SELCAL_H
#define SELCAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. Values are stable.
 */
typedef enum SelcalStatus {
  SELCAL_STATUS_OK = 0,
  SELCAL_STATUS_IO = 1,
  SELCAL_STATUS_PARSE = 2,
  SELCAL_STATUS_VALIDATION = 3,
  SELCAL_STATUS_ARITY = 4,
  SELCAL_STATUS_ARGUMENT = 5,
  SELCAL_STATUS_INSUFFICIENT_EXAMPLES = 6,
  SELCAL_STATUS_NOT_FITTED = 7,
  SELCAL_STATUS_DIVERGED = 8,
  SELCAL_STATUS_UNSUPPORTED = 9,
  SELCAL_STATUS_SERIALIZATION = 10,
  SELCAL_STATUS_NULL_POINTER = 11,
  SELCAL_STATUS_INVALID_UTF8 = 12,
  SELCAL_STATUS_PANIC = 13,
} SelcalStatus;

/**
 * Annotation strategies, in the same order as the CLI names.
 */
typedef enum SelcalStrategy {
  SELCAL_STRATEGY_CLASSIFICATION = 0,
  SELCAL_STRATEGY_REGRESSION_A1 = 1,
  SELCAL_STRATEGY_REGRESSION_A2 = 2,
} SelcalStrategy;

/**
 * Opaque calibrator handle.
 */
typedef struct SelcalCalibrator SelcalCalibrator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *selcal_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *selcal_version(void);

/**
 * Loads a calibrator artifact from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum SelcalStatus selcal_calibrator_load(const char *path, struct SelcalCalibrator **out);

/**
 * Parses a calibrator artifact from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum SelcalStatus selcal_calibrator_from_json(const char *json, struct SelcalCalibrator **out);

/**
 * Creates the untrained max-probability baseline for `num_classes` classes.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum SelcalStatus selcal_calibrator_maxprob(size_t num_classes, struct SelcalCalibrator **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from this library and not be used afterwards.
 */
void selcal_calibrator_free(struct SelcalCalibrator *handle);

/**
 * Number of classes the calibrator expects.
 *
 * # Safety
 * `handle` must be a live handle; `out` must be valid for writes.
 */
enum SelcalStatus selcal_calibrator_num_classes(const struct SelcalCalibrator *handle, size_t *out);

/**
 * Confidence in `[0, 1]` for one prediction.
 *
 * `probs` holds the `num_classes` class probabilities. The optional aux
 * features (`premise_length`, `hypothesis_length`, `similarity`) are given
 * as `n_aux` parallel key/value arrays; pass `n_aux = 0` for none.
 *
 * # Safety
 * Array arguments must hold the stated number of elements; keys must be
 * NUL-terminated strings.
 */
enum SelcalStatus selcal_calibrator_score(const struct SelcalCalibrator *handle,
                                          const double *probs,
                                          size_t num_classes,
                                          const char *const *aux_keys,
                                          const double *aux_values,
                                          size_t n_aux,
                                          double *out);

/**
 * Numerically stable softmax of `n` logits into `out`.
 *
 * # Safety
 * `logits` and `out` must each hold `n` values.
 */
enum SelcalStatus selcal_softmax(const double *logits, size_t n, double *out);

/**
 * Calibration target of one prediction under `strategy`.
 *
 * # Safety
 * `probs` must hold `num_classes` values; `out` must be valid for writes.
 */
enum SelcalStatus selcal_annotate(enum SelcalStrategy strategy,
                                  const double *probs,
                                  size_t num_classes,
                                  size_t gold,
                                  double *out);

/**
 * Area under the risk-coverage curve: mean of the per-rank risks and the
 * trapezoid variant. Either out-pointer may be null.
 *
 * # Safety
 * `conf` and `correct` must each hold `n` values.
 */
enum SelcalStatus selcal_auc(const double *conf,
                             const uint8_t *correct,
                             size_t n,
                             double *out_mean,
                             double *out_trapezoid);

/**
 * Coverage and selective accuracy at threshold `th`; an example is answered
 * iff its confidence is strictly above `th`.
 *
 * # Safety
 * `conf` and `correct` must each hold `n` values; outputs must be valid
 * for writes.
 */
enum SelcalStatus selcal_coverage_accuracy(const double *conf,
                                           const uint8_t *correct,
                                           size_t n,
                                           double th,
                                           double *out_coverage,
                                           double *out_accuracy);

/**
 * Threshold with the largest coverage whose selective accuracy reaches
 * `target`; may be negative infinity (answer everything).
 *
 * # Safety
 * `conf` and `correct` must each hold `n` values; `out` must be valid for
 * writes.
 */
enum SelcalStatus selcal_select_threshold(const double *conf,
                                          const uint8_t *correct,
                                          size_t n,
                                          double target,
                                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELCAL_H */
