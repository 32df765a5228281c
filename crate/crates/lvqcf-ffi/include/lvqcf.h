/* C interface to the lvqcf counterfactual-explanation library. */

#ifndef LVQCF_H
#define LVQCF_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible entry point.
typedef enum LvqcfStatus {
  LVQCF_STATUS_OK = 0,
  // A required pointer argument was NULL.
  LVQCF_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  LVQCF_STATUS_INVALID_UTF8 = 2,
  // A JSON document or file failed to parse or validate.
  LVQCF_STATUS_PARSE_ERROR = 3,
  // Arguments were structurally valid but rejected (dimension mismatch,
  // unknown label, bad options).
  LVQCF_STATUS_INVALID_ARGUMENT = 4,
  // The request was well-formed but no counterfactual exists; the result
  // JSON still carries the per-target diagnostics.
  LVQCF_STATUS_NO_SOLUTION = 5,
  // Unexpected internal failure (caught panic).
  LVQCF_STATUS_INTERNAL_ERROR = 6,
} LvqcfStatus;

// Opaque model handle.
typedef struct LvqcfModel LvqcfModel;

// Copy of the last error message on this thread (empty string when the
// last call succeeded). Free with `lvqcf_string_free`.
char *lvqcf_last_error(void);

// Release a string allocated by this library.
//
// # Safety
// `s` must be a pointer previously returned by an `lvqcf_*` function and
// not yet freed; NULL is accepted and ignored.
void lvqcf_string_free(char *s);

// Parse a model from a JSON document.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum LvqcfStatus lvqcf_model_load_json(const char *json, struct LvqcfModel **out);

// Load a model from a JSON file on disk.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LvqcfStatus lvqcf_model_load_file(const char *path, struct LvqcfModel **out);

// Serialize a model back to its canonical JSON document.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum LvqcfStatus lvqcf_model_to_json(const struct LvqcfModel *model, char **out);

// Destroy a model handle. NULL is accepted and ignored.
//
// # Safety
// `model` must come from a load function and not be freed twice.
void lvqcf_model_free(struct LvqcfModel *model);

// Feature-space dimension; 0 for a NULL handle.
//
// # Safety
// `model` must be a live handle or NULL.
size_t lvqcf_model_dim(const struct LvqcfModel *model);

// Number of prototypes; 0 for a NULL handle.
//
// # Safety
// `model` must be a live handle or NULL.
size_t lvqcf_model_prototype_count(const struct LvqcfModel *model);

// Winner-takes-all prediction for a dense vector of length `len`.
//
// # Safety
// `model` must be live, `x` must point to `len` doubles, `out_label` must
// be a valid pointer.
enum LvqcfStatus lvqcf_predict(const struct LvqcfModel *model,
                               const double *x,
                               size_t len,
                               int64_t *out_label);

// Squared (generalized) distance between `x` and prototype `prototype`.
//
// # Safety
// `model` must be live, `x` must point to `len` doubles, `out` must be a
// valid pointer.
enum LvqcfStatus lvqcf_distance(const struct LvqcfModel *model,
                                const double *x,
                                size_t len,
                                size_t prototype,
                                double *out);

// Compute a counterfactual for `x` toward `target_label`.
//
// `options_json` may be NULL for defaults; otherwise it is a JSON object
// with optional fields `regularizer` ("manhattan" | "euclidean" | "gl2"),
// `alpha`, `gl2_matrix`, `epsilon`, `constraints` (same schema as the CLI
// constraints file), `parallel` and `baseline`.
//
// On `OK` and on `NO_SOLUTION`, `out_json` receives the result document
// `{x_cf, distance, target_prototype, per_target, total_wall_time_ms}`;
// with `NO_SOLUTION` the point fields are null and only the per-target
// statuses are populated.
//
// # Safety
// `model` must be live, `x` must point to `len` doubles, `out_json` must
// be a valid pointer, and `options_json` must be NULL or NUL-terminated.
enum LvqcfStatus lvqcf_explain(const struct LvqcfModel *model,
                               const double *x,
                               size_t len,
                               int64_t target_label,
                               const char *options_json,
                               char **out_json);

#endif  /* LVQCF_H */
