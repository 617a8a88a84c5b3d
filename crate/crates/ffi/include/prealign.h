#ifndef PREALIGN_H
#define PREALIGN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PA_NUM_EXPERTS 4

#define PA_NUM_TASKS 4

#define PA_CHECKPOINT_ALIGN 0

#define PA_CHECKPOINT_TRAIN 1

/**
 * Result codes shared by every fallible function.
 */
typedef enum PaStatus {
  PA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PA_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration or argument value.
   */
  PA_STATUS_CONFIG = 2,
  /**
   * Runtime failure: I/O, corrupt checkpoint, numerical error.
   */
  PA_STATUS_RUNTIME = 3,
  /**
   * A string argument was not valid UTF-8.
   */
  PA_STATUS_INVALID_UTF8 = 4,
  /**
   * An internal panic was caught at the boundary.
   */
  PA_STATUS_PANIC = 5,
} PaStatus;

/**
 * Opaque alignment or training checkpoint.
 */
typedef struct PaCheckpoint PaCheckpoint;

/**
 * Opaque experiment configuration.
 */
typedef struct PaConfig PaConfig;

/**
 * Scores of one evaluation task.
 */
typedef struct PaTaskScore {
  uint64_t samples;
  double accuracy;
  double token_accuracy;
  /**
   * Mean gate probability per expert: caption, classification,
   * detection, segmentation.
   */
  double gate_means[4];
} PaTaskScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. Returns the message
 * length; pass a null buffer to query it.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t pa_last_error(char *buf, size_t len);

/**
 * A configuration with every default value.
 */
struct PaConfig *pa_config_default(void);

/**
 * Loads and validates a TOML or JSON config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PaStatus pa_config_load(const char *path, struct PaConfig **out);

/**
 * # Safety
 * `cfg` must come from this library and not be used afterwards.
 */
void pa_config_free(struct PaConfig *cfg);

/**
 * # Safety
 * `cfg` must be a live config handle.
 */
enum PaStatus pa_config_set_seed(struct PaConfig *cfg, uint64_t seed);

/**
 * Number of experts the router keeps (1..=4).
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum PaStatus pa_config_set_topk(struct PaConfig *cfg, uint32_t k);

/**
 * Writes the config's SHA-256 hex hash (64 characters) into `buf` and
 * returns its length.
 *
 * # Safety
 * `cfg` must be a live config handle; `buf` null or valid for `len` bytes.
 */
size_t pa_config_hash(const struct PaConfig *cfg, char *buf, size_t len);

/**
 * Writes the synthetic dataset into `out_dir`.
 *
 * # Safety
 * `cfg` must be a live handle and `out_dir` a NUL-terminated string.
 */
enum PaStatus pa_gen_data(const struct PaConfig *cfg, const char *out_dir);

/**
 * Runs the staged alignment, writing checkpoints and metrics to
 * `out_dir`. A non-zero `resume` continues from the latest stage
 * checkpoint found there.
 *
 * # Safety
 * `cfg` must be a live handle and `out_dir` a NUL-terminated string.
 */
enum PaStatus pa_align(const struct PaConfig *cfg, const char *out_dir, int32_t resume);

/**
 * Trains from the alignment checkpoint at `align_path`.
 *
 * # Safety
 * `cfg` must be a live handle; the paths NUL-terminated strings.
 */
enum PaStatus pa_train(const struct PaConfig *cfg, const char *align_path, const char *out_dir);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PaStatus pa_checkpoint_load(const char *path, struct PaCheckpoint **out);

/**
 * # Safety
 * `ck` must come from this library and not be used afterwards.
 */
void pa_checkpoint_free(struct PaCheckpoint *ck);

/**
 * `PA_CHECKPOINT_ALIGN`, `PA_CHECKPOINT_TRAIN`, or -1 for a null handle.
 *
 * # Safety
 * `ck` must be null or a live checkpoint handle.
 */
int32_t pa_checkpoint_kind(const struct PaCheckpoint *ck);

/**
 * Evaluates a training checkpoint on the eval split of its own config.
 * `out` receives one score per task in the order caption, presence,
 * count, location.
 *
 * # Safety
 * `ck` must be a live handle; `out` valid for `PA_NUM_TASKS` elements.
 */
enum PaStatus pa_checkpoint_evaluate(const struct PaCheckpoint *ck, struct PaTaskScore *out);

/**
 * Top-k gate probabilities for four router logits. Excluded experts get
 * exactly zero unless `literal` is non-zero, which selects the variant
 * that zeroes excluded logits instead of masking them.
 *
 * # Safety
 * `logits` and `probs` must each be valid for four `f64`s.
 */
enum PaStatus pa_route(const double *logits, uint32_t k, int32_t literal, double *probs);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pa_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREALIGN_H */
