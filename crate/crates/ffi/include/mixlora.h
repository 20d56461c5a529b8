#ifndef MIXLORA_H
#define MIXLORA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MlGating {
  ML_GATING_SOFT = 0,
  ML_GATING_HARD = 1,
} MlGating;

typedef enum MlRouting {
  ML_ROUTING_INSTANCE = 0,
  ML_ROUTING_TASK = 1,
  ML_ROUTING_RANDOM = 2,
} MlRouting;

/**
 * Result of every fallible call.
 */
typedef enum MlStatus {
  ML_STATUS_OK = 0,
  ML_STATUS_CONFIG = 1,
  ML_STATUS_ARGUMENT = 2,
  ML_STATUS_SHAPE = 3,
  ML_STATUS_NUMERIC = 4,
  ML_STATUS_STATE = 5,
  ML_STATUS_DEGENERATE = 6,
  ML_STATUS_CONSTRUCTION = 7,
  ML_STATUS_TRAINING = 8,
  ML_STATUS_FORMAT = 9,
  ML_STATUS_IO = 10,
  ML_STATUS_NULL_POINTER = 11,
  ML_STATUS_PANIC = 12,
} MlStatus;

/**
 * A model plus the optimizer state used by `ml_model_train_step`.
 */
typedef struct MlModel MlModel;

/**
 * Adapter configuration. `alpha` and `init_std` take their defaults
 * (2E and 1/sqrt(d_in)) when NaN; `num_tasks` is only read under task
 * routing.
 */
typedef struct MlMixLoraConfig {
  size_t d_in;
  size_t d_out;
  size_t num_factors;
  size_t rank;
  double alpha;
  double init_std;
  enum MlRouting routing;
  enum MlGating gating;
  bool cfs;
  size_t num_tasks;
} MlMixLoraConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ml_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ml_last_error(char *buf, size_t len);

/**
 * Creates a routed adapter around the `d_out×d_in` base weight `base_w`.
 * Initialization draws from `seed`.
 *
 * # Safety
 * `config` and `out` must be valid pointers; `base_w` must hold
 * `d_out·d_in` doubles.
 */
enum MlStatus ml_mixlora_create(const struct MlMixLoraConfig *config,
                                const double *base_w,
                                uint64_t seed,
                                struct MlModel **out);

/**
 * Creates a plain LoRA adapter of rank `rank`. NaN `alpha` / `init_std`
 * select the defaults 2·rank and 1/sqrt(d_in).
 *
 * # Safety
 * `base_w` must hold `d_out·d_in` doubles and `out` must be valid.
 */
enum MlStatus ml_lora_create(const double *base_w,
                             size_t d_out,
                             size_t d_in,
                             size_t rank,
                             double alpha,
                             double init_std,
                             uint64_t seed,
                             struct MlModel **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ml_model_free(struct MlModel *model);

/**
 * Input and output widths of the model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum MlStatus ml_model_dims(const struct MlModel *model, size_t *d_in, size_t *d_out);

/**
 * Forward pass of one `seq×d_in` instance into `out` (`seq×d_out`).
 * `task_id` < 0 means none; `route_seed` seeds random routing.
 *
 * # Safety
 * `h` must hold `seq·d_in` doubles and `out` `out_len` doubles.
 */
enum MlStatus ml_model_forward(const struct MlModel *model,
                               const double *h,
                               size_t seq,
                               size_t d_in,
                               int64_t task_id,
                               uint64_t route_seed,
                               double *out,
                               size_t out_len);

/**
 * One Adam step on the mean squared error over `batch` instances.
 * `inputs` is `batch×seq×d_in`, `targets` `batch×seq×d_out`, both
 * contiguous. The optimizer state lives in the handle and is saved with
 * it. The batch loss before the step is written to `loss`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles; `loss` may be null.
 */
enum MlStatus ml_model_train_step(struct MlModel *model,
                                  const double *inputs,
                                  const double *targets,
                                  size_t batch,
                                  size_t seq,
                                  int64_t task_id,
                                  double lr,
                                  uint64_t route_seed,
                                  double *loss);

/**
 * Writes the model (and optimizer state, if any) to `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string.
 */
enum MlStatus ml_checkpoint_save(const struct MlModel *model, const char *path);

/**
 * Reads a checkpoint into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` valid.
 */
enum MlStatus ml_checkpoint_load(const char *path, struct MlModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXLORA_H */
