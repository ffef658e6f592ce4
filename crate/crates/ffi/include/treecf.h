#ifndef TREECF_H
#define TREECF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum TcfStatus {
  TCF_STATUS_OK = 0,
  TCF_STATUS_NULL_ARGUMENT = 1,
  TCF_STATUS_INVALID_UTF8 = 2,
  TCF_STATUS_IO = 3,
  // Malformed data, schema, model or JSON input.
  TCF_STATUS_FORMAT = 4,
  // Instance values do not conform to the schema.
  TCF_STATUS_INVALID_INSTANCE = 5,
  TCF_STATUS_INVALID_ARGUMENT = 6,
  TCF_STATUS_NO_CONTRAST_CLASS = 7,
  TCF_STATUS_NO_PATH = 8,
  // Output buffer too small; the required size is reported.
  TCF_STATUS_BUFFER_TOO_SMALL = 9,
  TCF_STATUS_PANIC = 10,
  TCF_STATUS_OTHER = 11,
} TcfStatus;

typedef struct TcfDataset TcfDataset;

typedef struct TcfExplainer TcfExplainer;

typedef struct TcfModel TcfModel;

typedef struct TcfVae TcfVae;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or NULL. The pointer is
// valid until the next `tcf_*` call on the same thread.
const char *tcf_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *tcf_version(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must be NULL or a pointer obtained from this library and not yet freed.
void tcf_string_free(char *s);

// Loads a CSV data file validated against a JSON schema file.
//
// # Safety
// Path arguments must be NUL-terminated strings; `out` must be writable.
enum TcfStatus tcf_dataset_load(const char *data_path,
                                const char *schema_path,
                                struct TcfDataset **out);

// # Safety
// `ds` must be NULL or a live handle from [`tcf_dataset_load`].
void tcf_dataset_free(struct TcfDataset *ds);

// Row and feature counts of a dataset.
//
// # Safety
// `ds` must be a live handle; out-pointers must be writable.
enum TcfStatus tcf_dataset_shape(const struct TcfDataset *ds, size_t *rows, size_t *features);

// Copies row `index` into `values`, which holds `capacity` doubles.
// Categorical values are category indices.
//
// # Safety
// `ds` must be a live handle and `values` must hold `capacity` doubles.
enum TcfStatus tcf_dataset_row(const struct TcfDataset *ds,
                               size_t index,
                               double *values,
                               size_t capacity);

// Loads a saved reference model.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TcfStatus tcf_model_load(const char *path, struct TcfModel **out);

// # Safety
// `model` must be NULL or a live handle from [`tcf_model_load`].
void tcf_model_free(struct TcfModel *model);

// Class probabilities for one instance. `probabilities` holds `capacity`
// doubles; the class count is written to `classes` even when the buffer is
// too small.
//
// # Safety
// `values` must hold `n_values` doubles and `probabilities` `capacity` doubles.
enum TcfStatus tcf_model_predict(const struct TcfModel *model,
                                 const double *values,
                                 size_t n_values,
                                 double *probabilities,
                                 size_t capacity,
                                 size_t *classes);

// Loads a saved VAE.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum TcfStatus tcf_vae_load(const char *path, struct TcfVae **out);

// # Safety
// `vae` must be NULL or a live handle from [`tcf_vae_load`].
void tcf_vae_free(struct TcfVae *vae);

// Builds an explainer over a pool dataset. The explainer shares the three
// artifacts, so the input handles may be freed afterwards.
//
// # Safety
// Inputs must be live handles; `out` must be writable.
enum TcfStatus tcf_explainer_new(const struct TcfDataset *pool,
                                 const struct TcfModel *model,
                                 const struct TcfVae *vae,
                                 struct TcfExplainer **out);

// # Safety
// `explainer` must be NULL or a live handle from [`tcf_explainer_new`].
void tcf_explainer_free(struct TcfExplainer *explainer);

// Explains one instance and writes the explanation document as JSON to
// `out_json`. `config_json` may be NULL for the default configuration or a
// JSON object with any subset of the configuration fields.
//
// # Safety
// `values` must hold `n_values` doubles; `config_json` must be NULL or a
// NUL-terminated string; `out_json` must be writable.
enum TcfStatus tcf_explain_json(const struct TcfExplainer *explainer,
                                const double *values,
                                size_t n_values,
                                const char *config_json,
                                char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TREECF_H */
