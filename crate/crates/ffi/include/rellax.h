/* C interface to the rellax recommendation pipeline. */

#pragma once

/* Generated with cbindgen:0.29.4 */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code for every fallible call.
 */
typedef enum RlxStatus {
  RLX_STATUS_OK = 0,
  RLX_STATUS_NULL_ARGUMENT = 1,
  RLX_STATUS_INVALID_ARGUMENT = 2,
  RLX_STATUS_RUNTIME_ERROR = 3,
  RLX_STATUS_UTF8_ERROR = 4,
} RlxStatus;

/**
 * Opaque: a fully built pipeline (frozen models, samples, config).
 */
typedef struct RlxPipeline RlxPipeline;

/**
 * Opaque: trained adapter stack plus the knobs it was trained with.
 */
typedef struct RlxTrained RlxTrained;

/**
 * Aggregate metrics for one evaluation.
 */
typedef struct RlxMetrics {
  double auc;
  double logloss;
  double acc;
  uintptr_t n;
} RlxMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rlx_version(void);

/**
 * Message for the most recent failure on this thread; empty when the last
 * call succeeded. Owned by the library.
 */
const char *rlx_last_error(void);

/**
 * Build a pipeline from a TOML config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RlxStatus rlx_pipeline_from_config_file(const char *path, struct RlxPipeline **out);

/**
 * Build a pipeline from TOML text (an empty string selects the defaults).
 *
 * # Safety
 * `toml_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RlxStatus rlx_pipeline_from_config_text(const char *toml_text, struct RlxPipeline **out);

/**
 * Release a pipeline handle. Null is a no-op.
 *
 * # Safety
 * `pipeline` must have come from a `rlx_pipeline_from_*` call and must not
 * be used afterwards.
 */
void rlx_pipeline_free(struct RlxPipeline *pipeline);

/**
 * Number of train/test samples behind a pipeline.
 *
 * # Safety
 * All pointers must be valid; `pipeline` must be a live handle.
 */
enum RlxStatus rlx_pipeline_counts(const struct RlxPipeline *pipeline,
                                   uintptr_t *train,
                                   uintptr_t *test);

/**
 * Train adapters with the pipeline's configured variant and seed.
 *
 * # Safety
 * `pipeline` must be a live handle and `out` a valid pointer.
 */
enum RlxStatus rlx_train(const struct RlxPipeline *pipeline, struct RlxTrained **out);

/**
 * Release a trained handle. Null is a no-op.
 *
 * # Safety
 * `trained` must have come from `rlx_train` and must not be used afterwards.
 */
void rlx_trained_free(struct RlxTrained *trained);

/**
 * Evaluate on the test split. `trained` may be null for the adapter-free
 * base configuration.
 *
 * # Safety
 * `pipeline` must be live, `trained` live or null, `out` valid.
 */
enum RlxStatus rlx_evaluate(const struct RlxPipeline *pipeline,
                            const struct RlxTrained *trained,
                            struct RlxMetrics *out);

/**
 * Pointwise click probability and label for one test sample.
 *
 * # Safety
 * `pipeline` must be live, `trained` live or null, outputs valid.
 */
enum RlxStatus rlx_score_sample(const struct RlxPipeline *pipeline,
                                const struct RlxTrained *trained,
                                uintptr_t test_index,
                                double *score,
                                uint8_t *label);

/**
 * AUC of scores against binary labels (ties get half credit).
 *
 * # Safety
 * `labels` and `scores` must point to `n` readable elements; `out` valid.
 */
enum RlxStatus rlx_auc(const uint8_t *labels, const double *scores, uintptr_t n, double *out);

/**
 * Two-term softmax over answer logits: `sigmoid(yes - no)`.
 */
double rlx_pointwise_score(double yes_logit, double no_logit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
