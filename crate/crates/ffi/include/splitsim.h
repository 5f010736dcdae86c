#ifndef SPLITSIM_H
#define SPLITSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum SplitsimStatus {
  SPLITSIM_STATUS_OK = 0,
  SPLITSIM_STATUS_NULL_ARGUMENT = 1,
  SPLITSIM_STATUS_INVALID_UTF8 = 2,
  SPLITSIM_STATUS_RANGE = 3,
  SPLITSIM_STATUS_DOMAIN = 4,
  SPLITSIM_STATUS_INFEASIBLE_PLAN = 5,
  SPLITSIM_STATUS_NO_FEASIBLE_ASSIGNMENT = 6,
  SPLITSIM_STATUS_SIZE_GUARD = 7,
  SPLITSIM_STATUS_ALL_DROPOUT = 8,
  SPLITSIM_STATUS_CONFIG = 9,
  SPLITSIM_STATUS_IO = 10,
  SPLITSIM_STATUS_PARSE = 11,
  SPLITSIM_STATUS_PANIC = 12,
} SplitsimStatus;

/**
 * A model layer graph.
 */
typedef struct SplitsimModel SplitsimModel;

/**
 * A scenario configuration, adjustable before it is run.
 */
typedef struct SplitsimScenario SplitsimScenario;

/**
 * Outcome of a recomputation plan.
 */
typedef struct SplitsimPlan {
  /**
   * Parameters, optimizer state and the plan's activation peak, in bytes.
   */
  double peak_memory_bytes;
  uint64_t extra_forward_flops;
  size_t num_segments;
  size_t num_memory_centric;
} SplitsimPlan;

/**
 * Whole-run statistics of a simulated scenario.
 */
typedef struct SplitsimSummary {
  uint64_t seed;
  size_t rounds;
  double mean_t_system_s;
  double median_t_system_s;
  double p95_t_system_s;
  double total_time_s;
  uint64_t total_comm_bytes;
  size_t total_dropouts;
  uint64_t final_active_samples;
  double mean_peak_memory_bytes;
  double max_peak_memory_bytes;
} SplitsimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *splitsim_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *splitsim_version(void);

/**
 * Loads a bundled profile (`"alexnet"`) or a profile file path.
 *
 * # Safety
 * `reference` must be a NUL-terminated string and `out` writable.
 */
enum SplitsimStatus splitsim_model_load(const char *reference, struct SplitsimModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`splitsim_model_load`] and not be used afterwards.
 */
void splitsim_model_free(struct SplitsimModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SplitsimStatus splitsim_model_num_layers(const struct SplitsimModel *model, size_t *out);

/**
 * Bytes to train the whole model on one device at `batch`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SplitsimStatus splitsim_model_training_memory(const struct SplitsimModel *model,
                                                   uint32_t batch,
                                                   double *out);

/**
 * Bytes to run inference with the whole model at `batch`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SplitsimStatus splitsim_model_inference_memory(const struct SplitsimModel *model,
                                                    uint32_t batch,
                                                    double *out);

/**
 * Training bytes of layers `1..=cut`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SplitsimStatus splitsim_model_device_memory(const struct SplitsimModel *model,
                                                 size_t cut,
                                                 uint32_t batch,
                                                 double *out);

/**
 * Cost-aware recomputation plan for layers `1..=cut` under `budget_bytes`.
 * `segment_size` 0 picks the default segmentation.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SplitsimStatus splitsim_plan_memory(const struct SplitsimModel *model,
                                         size_t cut,
                                         uint32_t batch,
                                         double budget_bytes,
                                         size_t segment_size,
                                         struct SplitsimPlan *out);

/**
 * Kullback-Leibler divergence of two distributions of length `len`.
 *
 * # Safety
 * `p` and `q` must point to `len` readable doubles and `out` be writable.
 */
enum SplitsimStatus splitsim_kld(const double *p, const double *q, size_t len, double *out);

/**
 * Statistical utility of a set of per-sample losses.
 *
 * # Safety
 * `losses` must point to `len` readable doubles and `out` be writable.
 */
enum SplitsimStatus splitsim_stat(const double *losses, size_t len, double *out);

/**
 * Loads a scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SplitsimStatus splitsim_scenario_load(const char *path, struct SplitsimScenario **out);

/**
 * Applies one `dotted.key=value` override.
 *
 * # Safety
 * `scenario` must be a live handle and `assignment` a NUL-terminated string.
 */
enum SplitsimStatus splitsim_scenario_set(struct SplitsimScenario *scenario,
                                          const char *assignment);

/**
 * Simulates the scenario. With a non-null `out_dir` the round reports are
 * also written there.
 *
 * # Safety
 * `scenario` must be a live handle, `out_dir` null or a NUL-terminated
 * string, and `out` writable.
 */
enum SplitsimStatus splitsim_scenario_run(const struct SplitsimScenario *scenario,
                                          const char *out_dir,
                                          struct SplitsimSummary *out);

/**
 * Releases a scenario. Null is ignored.
 *
 * # Safety
 * `scenario` must come from [`splitsim_scenario_load`] and not be used afterwards.
 */
void splitsim_scenario_free(struct SplitsimScenario *scenario);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLITSIM_H */
