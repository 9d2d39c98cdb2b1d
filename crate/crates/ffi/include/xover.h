#ifndef XOVER_H
#define XOVER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum XoverStatus {
  XOVER_STATUS_OK = 0,
  // A required pointer argument was null.
  XOVER_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8 or an argument was out of range.
  XOVER_STATUS_INVALID_ARGUMENT = 2,
  XOVER_STATUS_IO = 3,
  XOVER_STATUS_PARSE = 4,
  // The data violate the cross-over rectangle or labelling rules.
  XOVER_STATUS_VALIDATION = 5,
  // A fit or factorization failed.
  XOVER_STATUS_NUMERICAL = 6,
  // An output buffer was too small; the required length was written.
  XOVER_STATUS_BUFFER_TOO_SMALL = 7,
  XOVER_STATUS_PANIC = 8,
} XoverStatus;

// A validated cross-over dataset.
typedef struct XoverDataset XoverDataset;

// A simulation generator.
typedef struct XoverGenerator XoverGenerator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *xover_version(void);

// Message of the last failure on this thread; empty if none. Valid until
// the next failing call on the same thread.
const char *xover_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void xover_string_free(char *s);

// Loads a long-format CSV; incomplete subjects are dropped.
//
// # Safety
// `path` and `placebo` must be NUL-terminated strings; `out` must be
// writable.
enum XoverStatus xover_dataset_load(const char *path,
                                    const char *placebo,
                                    struct XoverDataset **out);

// # Safety
// `ds` must come from [`xover_dataset_load`] and not have been freed.
void xover_dataset_free(struct XoverDataset *ds);

// Writes n, P and T. Any output pointer may be null.
//
// # Safety
// `ds` must be a live dataset handle.
enum XoverStatus xover_dataset_shape(const struct XoverDataset *ds,
                                     size_t *n,
                                     size_t *periods,
                                     size_t *timepoints);

// Estimates of one treatment at every timepoint under one configuration
// (`"mu1"` or `"<mean>+<cov>"`, e.g. `"abm+unstructured"`).
//
// Each output array must hold `capacity` values; `*len` receives T. If
// `capacity < T` nothing else is written and `BufferTooSmall` is returned.
//
// # Safety
// `ds` must be a live handle, strings NUL-terminated, and each non-null
// array writable for `capacity` doubles.
enum XoverStatus xover_estimate(const struct XoverDataset *ds,
                                const char *configuration,
                                const char *treatment,
                                double level,
                                double *estimate,
                                double *se,
                                double *ci_lower,
                                double *ci_upper,
                                size_t capacity,
                                size_t *len);

// Full analysis (all twelve models and the paired difference, 95% CIs) as
// a JSON report.
//
// # Safety
// `ds` must be a live handle and `out` writable.
enum XoverStatus xover_analyze_json(const struct XoverDataset *ds, char **out);

// Largest relative gap between the G-computation and augmented estimates,
// and largest residual-identity violation, over the twelve models.
//
// # Safety
// `ds` must be a live handle; output pointers may be null.
enum XoverStatus xover_verify(const struct XoverDataset *ds, double *max_gap, double *max_identity);

// # Safety
// `ds` must be a live handle and `out` writable.
enum XoverStatus xover_generator_fit(const struct XoverDataset *ds, struct XoverGenerator **out);

// # Safety
// `json` must be NUL-terminated and `out` writable.
enum XoverStatus xover_generator_from_json(const char *json, struct XoverGenerator **out);

// # Safety
// `g` must be a live handle and `out` writable.
enum XoverStatus xover_generator_to_json(const struct XoverGenerator *g, char **out);

// # Safety
// `g` must come from this library and not have been freed.
void xover_generator_free(struct XoverGenerator *g);

// Runs the simulation study over all configurations and returns the report
// as JSON. `workers` of 0 means one per CPU.
//
// # Safety
// `g` must be a live handle and `out` writable.
enum XoverStatus xover_simulate_json(const struct XoverGenerator *g,
                                     size_t replicates,
                                     uint64_t seed,
                                     size_t workers,
                                     char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XOVER_H */
