#ifndef DOCICL_H
#define DOCICL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DociclStatus {
  DOCICL_STATUS_OK = 0,
  DOCICL_STATUS_NULL_ARGUMENT = 1,
  DOCICL_STATUS_INVALID_UTF8 = 2,
  DOCICL_STATUS_INVALID_ARGUMENT = 3,
  DOCICL_STATUS_IO = 4,
  DOCICL_STATUS_PARSE = 5,
  DOCICL_STATUS_EVALUATION = 6,
  DOCICL_STATUS_PANIC = 7,
} DociclStatus;

// Opaque collection of documents.
typedef struct DociclDocuments DociclDocuments;

// Message for the last failed call on this thread, or NULL. The pointer stays
// valid until the next docicl call on the same thread.
const char *docicl_last_error(void);

// Library version as a static NUL-terminated string.
const char *docicl_version(void);

// Release a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void docicl_string_free(char *s);

// Release a document handle. NULL is ignored.
//
// # Safety
// `h` must come from this library and not be freed twice.
void docicl_documents_free(struct DociclDocuments *h);

// Load a normalized JSONL file.
//
// # Safety
// `path` must be a valid C string; `out` must be writable.
enum DociclStatus docicl_documents_load(const char *path, struct DociclDocuments **out);

// Load a raw dataset directory. `dataset` is FUNSD, CORD, SROIE or CUSTOM
// (a normalized file path).
//
// # Safety
// `dataset` and `root` must be valid C strings; `out` must be writable.
enum DociclStatus docicl_documents_load_dataset(const char *dataset,
                                                const char *root,
                                                struct DociclDocuments **out);

// Build a handle from a JSON array of documents.
//
// # Safety
// `json_text` must be a valid C string; `out` must be writable.
enum DociclStatus docicl_documents_from_json(const char *json_text, struct DociclDocuments **out);

// Serialize the documents, predictions included, as a JSON array.
//
// # Safety
// `h` must be a live handle; `out` must be writable.
enum DociclStatus docicl_documents_to_json(const struct DociclDocuments *h, char **out);

// Number of documents; 0 for NULL.
//
// # Safety
// `h` must be NULL or a live handle.
size_t docicl_documents_len(const struct DociclDocuments *h);

// Write the documents. With `with_predictions` nonzero the file is a
// predictions file, otherwise a normalized file.
//
// # Safety
// `h` must be a live handle; `path` must be a valid C string.
enum DociclStatus docicl_documents_write(const struct DociclDocuments *h,
                                         const char *path,
                                         int32_t with_predictions);

// Reorder every document in place with default XY-cut parameters.
//
// # Safety
// `h` must be a live handle.
enum DociclStatus docicl_documents_order(struct DociclDocuments *h);

// Perturbed copy of the documents. The per-word log is returned as JSON in
// `log_json` when that pointer is non-NULL.
//
// # Safety
// `h` must be a live handle; `out` must be writable; `log_json` may be NULL.
enum DociclStatus docicl_documents_perturb(const struct DociclDocuments *h,
                                           uint64_t seed,
                                           double p_char_delete,
                                           double p_substitute,
                                           struct DociclDocuments **out,
                                           char **log_json);

// Score `pred` against `gold` and return the report as JSON. `dataset` may be
// NULL to use the gold documents' dataset. `mode` is 0 for per-segment
// scoring and 1 for receipt key fields.
//
// # Safety
// Handles must be live; `dataset` must be NULL or a valid C string; `out`
// must be writable.
enum DociclStatus docicl_evaluate(const struct DociclDocuments *pred,
                                  const struct DociclDocuments *gold,
                                  const char *dataset,
                                  int32_t mode,
                                  char **out);

// Parse model output in the labeled record format; returns
// `{"entities": [...], "queries": [...], "diagnostics": [...]}`.
//
// # Safety
// `text` must be a valid C string; `out` must be writable.
enum DociclStatus docicl_parse_labeled(const char *text, char **out);

#endif  /* DOCICL_H */
