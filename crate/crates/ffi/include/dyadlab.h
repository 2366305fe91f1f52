#ifndef DYADLAB_H
#define DYADLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DyadStatus {
  DYAD_STATUS_OK = 0,
  DYAD_STATUS_NULL_POINTER = 1,
  DYAD_STATUS_INVALID_ARGUMENT = 2,
  DYAD_STATUS_BUDGET_EXCEEDED = 3,
  DYAD_STATUS_UNKNOWN_SUITE = 4,
  DYAD_STATUS_NUMERIC = 5,
  DYAD_STATUS_IO = 6,
  DYAD_STATUS_BUFFER_TOO_SMALL = 7,
  DYAD_STATUS_PANIC = 8,
} DyadStatus;

/**
 * An experiment config, validated.
 */
typedef struct DyadExperiment DyadExperiment;

/**
 * A measure on a dyadic lattice.
 */
typedef struct DyadMeasure DyadMeasure;

/**
 * The outcome of one check suite.
 */
typedef struct DyadReport DyadReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, NUL-terminated.
 *
 * # Safety
 * `buf` must be valid for `len` bytes and `needed` null or writable.
 */
enum DyadStatus dyad_last_error(char *buf, size_t len, size_t *needed);

/**
 * Builds a measure of the given family (e.g. `power:0.5`) on the unit root
 * cube of dimension `n` and depth `depth`.
 *
 * # Safety
 * `family` must be a NUL-terminated string and `out` writable.
 */
enum DyadStatus dyad_measure_generate(const char *family,
                                      size_t n,
                                      uint32_t depth,
                                      struct DyadMeasure **out);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void dyad_measure_free(struct DyadMeasure *m);

/**
 * Number of finest cells.
 *
 * # Safety
 * `m` must be a live handle or null.
 */
size_t dyad_measure_cell_count(const struct DyadMeasure *m);

/**
 * Copies the cell masses into `buf`, which must hold `dyad_measure_cell_count` values.
 *
 * # Safety
 * `buf` must be valid for `len` doubles.
 */
enum DyadStatus dyad_measure_masses(const struct DyadMeasure *m, double *buf, size_t len);

/**
 * Classical fractional A₂ over every cube down to `max_level`.
 *
 * # Safety
 * Handles must be live and `out` writable.
 */
enum DyadStatus dyad_a2(const struct DyadMeasure *sigma,
                        const struct DyadMeasure *omega,
                        double alpha,
                        uint32_t max_level,
                        double *out);

/**
 * Parses a TOML experiment config; a null `toml` gives the defaults.
 *
 * # Safety
 * `toml` must be null or NUL-terminated and `out` writable.
 */
enum DyadStatus dyad_experiment_new(const char *toml, struct DyadExperiment **out);

/**
 * # Safety
 * `e` must come from this library and not be used afterwards.
 */
void dyad_experiment_free(struct DyadExperiment *e);

/**
 * Operator norm of the discretized operator of an experiment, `L²(σ) → L²(ω)`.
 *
 * # Safety
 * `e` must be live and `out` writable.
 */
enum DyadStatus dyad_experiment_norm(const struct DyadExperiment *e, double *out);

/**
 * Runs one suite (`t1`, `goodlambda`, `truncation`, `polytesting`,
 * `cancellation`, `wavelets` or `corona`).
 *
 * # Safety
 * `e` must be live, `suite` NUL-terminated and `out` writable.
 */
enum DyadStatus dyad_experiment_verify(const struct DyadExperiment *e,
                                       const char *suite,
                                       struct DyadReport **out);

/**
 * # Safety
 * `r` must come from this library and not be used afterwards.
 */
void dyad_report_free(struct DyadReport *r);

/**
 * 1 when every non-vacuous check passed, 0 otherwise or for a null handle.
 *
 * # Safety
 * `r` must be a live handle or null.
 */
int32_t dyad_report_passed(const struct DyadReport *r);

/**
 * # Safety
 * `r` must be a live handle or null.
 */
size_t dyad_report_record_count(const struct DyadReport *r);

/**
 * Ratio of record `i`.
 *
 * # Safety
 * `r` must be live and `out` writable.
 */
enum DyadStatus dyad_report_ratio(const struct DyadReport *r, size_t i, double *out);

/**
 * The report as JSON. Call with a null `buf` to learn the size via `needed`.
 *
 * # Safety
 * `buf` must be valid for `len` bytes and `needed` null or writable.
 */
enum DyadStatus dyad_report_json(const struct DyadReport *r, char *buf, size_t len, size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYADLAB_H */
