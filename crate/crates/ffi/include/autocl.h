#ifndef AUTOCL_H
#define AUTOCL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AutoclStatus {
  AUTOCL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  AUTOCL_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  AUTOCL_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration, strategy or argument value.
   */
  AUTOCL_STATUS_INVALID_ARGUMENT = 3,
  /**
   * Malformed or unsuitable data.
   */
  AUTOCL_STATUS_DATA = 4,
  /**
   * File system failure.
   */
  AUTOCL_STATUS_IO = 5,
  /**
   * Non-finite values or a failed linear solve.
   */
  AUTOCL_STATUS_NUMERIC = 6,
  /**
   * An index was past the end of a list.
   */
  AUTOCL_STATUS_OUT_OF_RANGE = 7,
  /**
   * Internal failure; the library state is still usable.
   */
  AUTOCL_STATUS_PANIC = 8,
} AutoclStatus;

/**
 * Downstream task of a dataset.
 */
typedef enum AutoclTask {
  AUTOCL_TASK_CLASSIFICATION = 0,
  AUTOCL_TASK_FORECAST = 1,
  AUTOCL_TASK_ANOMALY = 2,
} AutoclTask;

/**
 * Search and training settings.
 */
typedef struct AutoclConfig AutoclConfig;

/**
 * A dataset split into train/validation/test.
 */
typedef struct AutoclDataset AutoclDataset;

/**
 * Result of pretraining and ranking candidates.
 */
typedef struct AutoclEvaluation AutoclEvaluation;

/**
 * Result of a candidate search.
 */
typedef struct AutoclSearch AutoclSearch;

/**
 * One contrastive-learning strategy.
 */
typedef struct AutoclStrategy AutoclStrategy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *autocl_version(void);

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into the library on this
 * thread.
 */
const char *autocl_last_error(void);

/**
 * Release a string returned by the library.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void autocl_string_free(char *s);

/**
 * Load a dataset file, or generate one from a `synth:<name>[:k=v,...]`
 * spec, and split it with the task's default ratios.
 *
 * # Safety
 * `spec` must be a nul-terminated string; `out` must be writable.
 */
enum AutoclStatus autocl_dataset_open(const char *spec,
                                      enum AutoclTask task,
                                      uint64_t seed,
                                      struct AutoclDataset **out);

/**
 * Number of train, validation and test items (samples or time steps).
 *
 * # Safety
 * `dataset` must be a live dataset; the outputs must be writable.
 */
enum AutoclStatus autocl_dataset_split_sizes(const struct AutoclDataset *dataset,
                                             size_t *train,
                                             size_t *val,
                                             size_t *test);

/**
 * # Safety
 * `dataset` must be null or a dataset from this library, not yet freed.
 */
void autocl_dataset_free(struct AutoclDataset *dataset);

/**
 * The strategy with every branch at its first option.
 *
 * # Safety
 * `out` must be writable.
 */
enum AutoclStatus autocl_strategy_default(struct AutoclStrategy **out);

/**
 * The built-in general-purpose strategy.
 *
 * # Safety
 * `out` must be writable.
 */
enum AutoclStatus autocl_strategy_ggs(struct AutoclStrategy **out);

/**
 * A uniformly random strategy.
 *
 * # Safety
 * `out` must be writable.
 */
enum AutoclStatus autocl_strategy_random(uint64_t seed, struct AutoclStrategy **out);

/**
 * Parse and validate a strategy from JSON.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum AutoclStatus autocl_strategy_from_json(const char *json, struct AutoclStrategy **out);

/**
 * Serialize a strategy; free the result with [`autocl_string_free`].
 *
 * # Safety
 * `strategy` must be a live strategy; `out` must be writable.
 */
enum AutoclStatus autocl_strategy_to_json(const struct AutoclStrategy *strategy, char **out);

/**
 * # Safety
 * `strategy` must be null or a strategy from this library, not yet freed.
 */
void autocl_strategy_free(struct AutoclStrategy *strategy);

/**
 * Settings for `task`. `json` may be null for the defaults, or a JSON object
 * overriding any subset of fields; an omitted `epsilon` keeps the task's
 * default.
 *
 * # Safety
 * `json` must be null or a nul-terminated string; `out` must be writable.
 */
enum AutoclStatus autocl_config_new(enum AutoclTask task,
                                    const char *json,
                                    struct AutoclConfig **out);

/**
 * Serialize the full settings; free the result with [`autocl_string_free`].
 *
 * # Safety
 * `config` must be a live config; `out` must be writable.
 */
enum AutoclStatus autocl_config_to_json(const struct AutoclConfig *config, char **out);

/**
 * # Safety
 * `config` must be null or a config from this library, not yet freed.
 */
void autocl_config_free(struct AutoclConfig *config);

/**
 * Run the candidate search over the full strategy space.
 *
 * # Safety
 * `dataset` and `config` must be live objects; `out` must be writable.
 */
enum AutoclStatus autocl_search_run(const struct AutoclDataset *dataset,
                                    const struct AutoclConfig *config,
                                    struct AutoclSearch **out);

/**
 * Number of accepted candidates.
 *
 * # Safety
 * `search` must be a live search result; `count` must be writable.
 */
enum AutoclStatus autocl_search_candidate_count(const struct AutoclSearch *search, size_t *count);

/**
 * Candidate at `rank` (0 = highest reward) and its reward. `reward` may be
 * null.
 *
 * # Safety
 * `search` must be a live search result; `out` must be writable; `reward`
 * must be null or writable.
 */
enum AutoclStatus autocl_search_candidate(const struct AutoclSearch *search,
                                          size_t rank,
                                          struct AutoclStrategy **out,
                                          double *reward);

/**
 * Write the per-step trace as JSON lines.
 *
 * # Safety
 * `search` must be a live search result; `path` a nul-terminated string.
 */
enum AutoclStatus autocl_search_write_trace(const struct AutoclSearch *search, const char *path);

/**
 * # Safety
 * `search` must be null or a search result from this library, not yet freed.
 */
void autocl_search_free(struct AutoclSearch *search);

/**
 * Fully pretrain one strategy and return its validation score (higher is
 * better).
 *
 * # Safety
 * `dataset`, `config` and `strategy` must be live; `score` writable.
 */
enum AutoclStatus autocl_strategy_score(const struct AutoclDataset *dataset,
                                        const struct AutoclConfig *config,
                                        const struct AutoclStrategy *strategy,
                                        double *score);

/**
 * Pretrain and rank `count` strategies.
 *
 * # Safety
 * `strategies` must point to `count` live strategy pointers; `dataset` and
 * `config` must be live; `out` must be writable.
 */
enum AutoclStatus autocl_evaluate(const struct AutoclDataset *dataset,
                                  const struct AutoclConfig *config,
                                  const struct AutoclStrategy *const *strategies,
                                  size_t count,
                                  struct AutoclEvaluation **out);

/**
 * Number of successfully ranked strategies.
 *
 * # Safety
 * `evaluation` must be live; `count` writable.
 */
enum AutoclStatus autocl_evaluation_count(const struct AutoclEvaluation *evaluation, size_t *count);

/**
 * Entry at `rank` (0 = best): its position in the input list and its
 * validation score. Either output may be null.
 *
 * # Safety
 * `evaluation` must be live; outputs null or writable.
 */
enum AutoclStatus autocl_evaluation_entry(const struct AutoclEvaluation *evaluation,
                                          size_t rank,
                                          size_t *index,
                                          double *val_score);

/**
 * Full ranking as JSON; free the result with [`autocl_string_free`].
 *
 * # Safety
 * `evaluation` must be live; `out` writable.
 */
enum AutoclStatus autocl_evaluation_to_json(const struct AutoclEvaluation *evaluation, char **out);

/**
 * Save the encoder of the best-ranked strategy as a checkpoint file.
 *
 * # Safety
 * `evaluation` must be live; `path` a nul-terminated string.
 */
enum AutoclStatus autocl_evaluation_save_best(const struct AutoclEvaluation *evaluation,
                                              const char *path);

/**
 * # Safety
 * `evaluation` must be null or an evaluation from this library, not yet
 * freed.
 */
void autocl_evaluation_free(struct AutoclEvaluation *evaluation);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOCL_H */
