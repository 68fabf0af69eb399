#ifndef TRANSITION_ATT_H
#define TRANSITION_ATT_H

/* Generated from the Rust sources by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define TATT_OK 0

// A pointer was null, a string was not UTF-8, or a handle was misused.
#define TATT_INVALID_ARGUMENT 1

// The input data, options, or spec are unusable as given.
#define TATT_VALIDATION_ERROR 2

// Estimation started but could not produce a result.
#define TATT_ESTIMATION_ERROR 3

// A bug: the library panicked. The process is still in a defined state.
#define TATT_INTERNAL_ERROR 4

// An immutable loaded panel.
typedef struct TattPanel TattPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *tatt_version(void);

// Message for this thread's most recent failure, or null if none. The caller
// owns the returned string and releases it with `tatt_string_free`.
char *tatt_last_error(void);

// Releases a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must be a pointer obtained from this library and not yet freed.
void tatt_string_free(char *s);

// Loads a panel from a CSV file. `schema_json` optionally renames columns,
// e.g. `{"unit":"person_id"}`; `alphabet_json` optionally fixes the category
// order, e.g. `["unemployed","employed"]`. Both may be null.
//
// # Safety
// `path`, and the non-null optional arguments, are NUL-terminated strings
// valid for the duration of the call; `out` is a valid writable pointer.
int32_t tatt_panel_load_csv(const char *path,
                            const char *schema_json,
                            const char *alphabet_json,
                            struct TattPanel **out);

// Parses a panel from in-memory CSV text. Arguments as in
// `tatt_panel_load_csv`.
//
// # Safety
// As for `tatt_panel_load_csv`, with `text` in place of `path`.
int32_t tatt_panel_parse_csv(const char *text,
                             const char *schema_json,
                             const char *alphabet_json,
                             struct TattPanel **out);

// Releases a panel handle. Null is a no-op.
//
// # Safety
// `panel` must come from a `tatt_panel_*` constructor and not be freed twice.
void tatt_panel_free(struct TattPanel *panel);

// Panel shape as JSON: unit counts, periods, categories, clusters, cohorts.
//
// # Safety
// `panel` is a live handle; `out` is a valid writable pointer.
int32_t tatt_panel_summary(const struct TattPanel *panel, char **out);

// Difference-in-differences effect series as JSON. Options are ignored —
// the comparator has no tuning knobs.
//
// # Safety
// As for `tatt_panel_summary`.
int32_t tatt_did(const struct TattPanel *panel, char **out);

// ATT as JSON. With `"types": 1` (the default) this is the nonparametric
// estimator and returns an effect series; with more types it fits the
// mixture and returns weights, per-type series, the aggregate, and theta.
//
// # Safety
// `panel` is a live handle; `options_json` is null or a NUL-terminated
// string; `out` is a valid writable pointer.
int32_t tatt_att(const struct TattPanel *panel, const char *options_json, char **out);

// Mixture fit as JSON: parameters, log-likelihood, BIC, and the second-stage
// effects.
//
// # Safety
// As for `tatt_att`.
int32_t tatt_mixture(const struct TattPanel *panel, const char *options_json, char **out);

// BIC model-selection table over 1..=types as JSON.
//
// # Safety
// As for `tatt_att`.
int32_t tatt_select_types(const struct TattPanel *panel, const char *options_json, char **out);

// Weighted bootstrap as JSON: run header plus one band row per coordinate
// (pointwise and uniform).
//
// # Safety
// As for `tatt_att`.
int32_t tatt_bootstrap(const struct TattPanel *panel, const char *options_json, char **out);

// Placebo effect at the last pre-treatment period as JSON.
//
// # Safety
// As for `tatt_att`.
int32_t tatt_placebo(const struct TattPanel *panel, const char *options_json, char **out);

// Pre-treatment transition-difference report as JSON; per type when
// `"types"` exceeds 1.
//
// # Safety
// As for `tatt_att`.
int32_t tatt_pretest(const struct TattPanel *panel, const char *options_json, char **out);

// Flow decomposition of one category's effect as JSON. `"focal"` selects the
// category by label or 0-based index; the default is the last category.
//
// # Safety
// As for `tatt_att`.
int32_t tatt_flows(const struct TattPanel *panel, const char *options_json, char **out);

// Staggered-adoption cohort effect table as JSON. `"mode"` selects the
// control pool: `"never"`, `"not_yet"`, or `"both"`.
//
// # Safety
// As for `tatt_att`.
int32_t tatt_staggered(const struct TattPanel *panel, const char *options_json, char **out);

// Draws a synthetic panel from a generative spec (JSON text, either a
// mixture spec with `"params"` or a staggered spec with `"cohorts"`) and
// returns the panel as CSV text.
//
// # Safety
// `spec_json` is a NUL-terminated string; `out_csv` is a valid writable
// pointer.
int32_t tatt_simulate(const char *spec_json, char **out_csv);

// Exact population effects implied by a mixture spec, as JSON.
//
// # Safety
// As for `tatt_simulate`.
int32_t tatt_true_att(const char *spec_json, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRANSITION_ATT_H */
