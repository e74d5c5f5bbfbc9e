#ifndef COTSCALE_H
#define COTSCALE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtsStatus {
  CTS_STATUS_OK = 0,
  CTS_STATUS_NULL_ARGUMENT = 1,
  CTS_STATUS_INVALID_UTF8 = 2,
  CTS_STATUS_INVALID_INPUT = 3,
  CTS_STATUS_PARSE_ERROR = 4,
  CTS_STATUS_CONFIG_ERROR = 5,
  CTS_STATUS_BACKEND_ERROR = 6,
  CTS_STATUS_PANIC = 7,
} CtsStatus;

typedef enum CtsBudgetMode {
  CTS_BUDGET_MODE_FORCE_EXACT = 0,
  CTS_BUDGET_MODE_MAX_ROUNDS = 1,
  CTS_BUDGET_MODE_EARLY_STOP = 2,
} CtsBudgetMode;

/**
 * Configured backends plus the async runtime that drives them.
 */
typedef struct CtsEngine CtsEngine;

/**
 * A parsed, validated trajectory.
 */
typedef struct CtsTrajectory CtsTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread; do not free.
 */
const char *cts_last_error(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void cts_string_free(char *s);

/**
 * Library version, static storage.
 */
const char *cts_version(void);

/**
 * Text guidance followed by image guidance over `len` elements:
 * `t = text_uncond + s_t * (text_cond - text_uncond)`, then
 * `out = image_uncond + s_i * (t - image_uncond)`.
 *
 * # Safety
 * All four arrays must hold `len` doubles; `out` may alias none of them.
 */
enum CtsStatus cts_nested_cfg(const double *text_cond,
                              const double *text_uncond,
                              const double *image_uncond,
                              size_t len,
                              double s_t,
                              double s_i,
                              double *out);

/**
 * Parses a reasoner reply into a verdict, returned as canonical JSON.
 *
 * # Safety
 * `raw_text` must be a NUL-terminated string; `out_json` a valid pointer.
 */
enum CtsStatus cts_verdict_parse(const char *raw_text, char **out_json);

/**
 * Round statistics of a JSONL trajectory dataset, as canonical JSON.
 *
 * # Safety
 * `jsonl` must be a NUL-terminated string; `out_json` a valid pointer.
 */
enum CtsStatus cts_round_statistics(const char *jsonl, char **out_json);

/**
 * Parses and validates one trajectory JSON line.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CtsStatus cts_trajectory_parse(const char *json, struct CtsTrajectory **out);

/**
 * # Safety
 * `t` must come from [`cts_trajectory_parse`] and not have been freed.
 */
void cts_trajectory_free(struct CtsTrajectory *t);

/**
 * Generated images in the trajectory (backtracks excluded).
 *
 * # Safety
 * `t` must be a live handle; `out` a valid pointer.
 */
enum CtsStatus cts_trajectory_image_count(const struct CtsTrajectory *t, size_t *out);

/**
 * Canonical JSON line of the trajectory.
 *
 * # Safety
 * `t` must be a live handle; `out_json` a valid pointer.
 */
enum CtsStatus cts_trajectory_to_json(const struct CtsTrajectory *t, char **out_json);

/**
 * Builds an engine from config JSON (the same schema as the CLI's config
 * file; relative paths resolve against the working directory).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CtsStatus cts_engine_new(const char *config_json, struct CtsEngine **out);

/**
 * # Safety
 * `engine` must come from [`cts_engine_new`] and not have been freed.
 */
void cts_engine_free(struct CtsEngine *engine);

/**
 * Runs the sequential controller; writes the trajectory JSON line.
 *
 * # Safety
 * `engine` must be a live handle, `prompt` a NUL-terminated string and
 * `out_json` a valid pointer.
 */
enum CtsStatus cts_engine_run_sequential(struct CtsEngine *engine,
                                         const char *prompt,
                                         uint32_t budget,
                                         enum CtsBudgetMode mode,
                                         char **out_json);

/**
 * Runs best-of-`n`; writes the outcome as canonical JSON.
 *
 * # Safety
 * `engine` must be a live handle, `prompt` a NUL-terminated string and
 * `out_json` a valid pointer.
 */
enum CtsStatus cts_engine_run_parallel(struct CtsEngine *engine,
                                       const char *prompt,
                                       uint32_t n,
                                       char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COTSCALE_H */
