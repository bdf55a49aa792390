#ifndef VITOPT_H
#define VITOPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result codes. Values 1 to 4 match the command-line exit codes.
typedef enum VitoptStatus {
  VITOPT_STATUS_OK = 0,
  // Invalid configuration, unknown layer, or an operation not allowed in
  // the model's precision state.
  VITOPT_STATUS_CONFIG_ERROR = 1,
  // Malformed input data, checkpoint or tensor shape, or an I/O failure.
  VITOPT_STATUS_DATA_ERROR = 2,
  VITOPT_STATUS_BUDGET_INFEASIBLE = 3,
  VITOPT_STATUS_INTERNAL_ERROR = 4,
  // A required pointer was null or a string was not UTF-8.
  VITOPT_STATUS_INVALID_ARGUMENT = 5,
  VITOPT_STATUS_PANIC = 6,
} VitoptStatus;

// Opaque dataset handle.
typedef struct VitoptDataset VitoptDataset;

// Opaque model handle.
typedef struct VitoptModel VitoptModel;

// Opaque handle holding activation statistics and the calibration samples
// they were gathered from.
typedef struct VitoptStats VitoptStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into this library on the same
// thread.
const char *vitopt_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *vitopt_version(void);

// Creates a randomly initialized model from a preset name ("vit-toy" or
// "vit-huge").
//
// # Safety
// `preset` must be a NUL-terminated string; `out` must be writable.
enum VitoptStatus vitopt_model_init(const char *preset, uint64_t seed, struct VitoptModel **out);

// Loads an EFLX checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum VitoptStatus vitopt_model_load(const char *path, struct VitoptModel **out);

// Writes `model` as an EFLX checkpoint.
//
// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum VitoptStatus vitopt_model_save(const struct VitoptModel *model, const char *path);

// Releases a model handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void vitopt_model_free(struct VitoptModel *model);

// Number of stored parameters.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_model_param_count(const struct VitoptModel *model, uint64_t *out);

// Bytes of all parameter tensors at their current dtypes.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_model_weight_bytes(const struct VitoptModel *model, uint64_t *out);

// Analytic peak memory estimate (weights plus live activations) at `batch`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_model_peak_bytes(const struct VitoptModel *model,
                                          uintptr_t batch,
                                          uint64_t *out);

// Number of output classes.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_model_num_classes(const struct VitoptModel *model, uintptr_t *out);

// Runs a forward pass over `batch` images laid out as `[batch, channels,
// size, size]` and writes `batch * num_classes` logits.
//
// # Safety
// `images` must point to `images_len` floats and `logits` to `logits_len`
// writable floats.
enum VitoptStatus vitopt_model_forward(const struct VitoptModel *model,
                                       const float *images,
                                       uintptr_t images_len,
                                       uintptr_t batch,
                                       float *logits,
                                       uintptr_t logits_len);

// Deterministic synthetic CIFAR-shaped dataset.
//
// # Safety
// `out` must be writable.
enum VitoptStatus vitopt_dataset_synthetic(uintptr_t n, uint64_t seed, struct VitoptDataset **out);

// Loads the CIFAR-10 binary test batch from a directory or file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum VitoptStatus vitopt_dataset_load_cifar10(const char *path, struct VitoptDataset **out);

// Number of samples.
//
// # Safety
// `dataset` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_dataset_len(const struct VitoptDataset *dataset, uintptr_t *out);

// Releases a dataset handle. Null is ignored.
//
// # Safety
// `dataset` must be null or a handle not yet freed.
void vitopt_dataset_free(struct VitoptDataset *dataset);

// Draws `calib_samples` samples from `dataset` and profiles every linear of
// `model` on them.
//
// # Safety
// `model` and `dataset` must be live handles; `out` must be writable.
enum VitoptStatus vitopt_profile(const struct VitoptModel *model,
                                 const struct VitoptDataset *dataset,
                                 uintptr_t calib_samples,
                                 uint64_t seed,
                                 struct VitoptStats **out);

// Statistics as a JSON string; free it with [`vitopt_string_free`].
//
// # Safety
// `stats` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_stats_to_json(const struct VitoptStats *stats, char **out);

// Releases a statistics handle. Null is ignored.
//
// # Safety
// `stats` must be null or a handle not yet freed.
void vitopt_stats_free(struct VitoptStats *stats);

// One pruning step removing `floor(percentile * C)` channels per MLP.
//
// # Safety
// `model` and `stats` must be live handles; `out` must be writable.
enum VitoptStatus vitopt_prune_step(const struct VitoptModel *model,
                                    const struct VitoptStats *stats,
                                    double percentile,
                                    struct VitoptModel **out);

// Prunes until the analytic peak at `batch` is at most `budget_bytes`.
// `steps_out` may be null.
//
// # Safety
// `model` and `stats` must be live handles; `out` must be writable.
enum VitoptStatus vitopt_prune_to_budget(const struct VitoptModel *model,
                                         const struct VitoptStats *stats,
                                         uint64_t budget_bytes,
                                         double percentile,
                                         uintptr_t batch,
                                         struct VitoptModel **out,
                                         uintptr_t *steps_out);

// Converts every linear to FP16.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum VitoptStatus vitopt_to_fp16(const struct VitoptModel *model, struct VitoptModel **out);

// Quantizes every linear to INT8 with static activation scaling. `stats`
// must have been gathered from this same model.
//
// # Safety
// `model` and `stats` must be live handles; `out` must be writable.
enum VitoptStatus vitopt_quantize(const struct VitoptModel *model,
                                  const struct VitoptStats *stats,
                                  struct VitoptModel **out);

// Runs the full pipeline from a TOML config, writes artifacts into
// `out_dir`, and returns the report JSON; free it with [`vitopt_string_free`].
//
// # Safety
// `config_toml` and `out_dir` must be NUL-terminated strings; `report_json`
// must be writable.
enum VitoptStatus vitopt_pipeline_run(const char *config_toml,
                                      const char *out_dir,
                                      char **report_json);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void vitopt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VITOPT_H */
