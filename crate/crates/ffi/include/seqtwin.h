#ifndef SEQTWIN_H
#define SEQTWIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SeqtwinStatus {
  SEQTWIN_STATUS_OK = 0,
  SEQTWIN_STATUS_NULL_POINTER = 1,
  SEQTWIN_STATUS_INVALID_UTF8 = 2,
  SEQTWIN_STATUS_IO = 3,
  /**
   * Bad magic, digest mismatch or malformed content.
   */
  SEQTWIN_STATUS_BUNDLE_CORRUPT = 4,
  SEQTWIN_STATUS_BUNDLE_VERSION = 5,
  /**
   * Request is not valid JSON or does not match the request schema.
   */
  SEQTWIN_STATUS_BAD_REQUEST = 6,
  /**
   * Patient features failed validation.
   */
  SEQTWIN_STATUS_VALIDATION = 7,
  SEQTWIN_STATUS_INVALID_REQUEST = 8,
  SEQTWIN_STATUS_INTERNAL = 9,
  SEQTWIN_STATUS_PANIC = 10,
} SeqtwinStatus;

/**
 * Opaque handle to a loaded bundle.
 */
typedef struct SeqtwinBundle SeqtwinBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a bundle file. On success `*out` receives a handle to release with
 * [`seqtwin_bundle_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SeqtwinStatus seqtwin_bundle_load(const char *path, struct SeqtwinBundle **out);

/**
 * # Safety
 * `handle` must come from [`seqtwin_bundle_load`] and not be used afterwards.
 */
void seqtwin_bundle_free(struct SeqtwinBundle *handle);

/**
 * Hex SHA-256 digest of the loaded bundle. Null if `handle` is null.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
char *seqtwin_bundle_digest(const struct SeqtwinBundle *handle);

/**
 * Run one simulation. `request_json` is a simulation request as accepted by
 * `POST /api/simulate`; on success `*out_json` receives the response.
 *
 * # Safety
 * `handle` must be a live handle, `request_json` NUL-terminated and
 * `out_json` a valid pointer.
 */
enum SeqtwinStatus seqtwin_simulate_json(const struct SeqtwinBundle *handle,
                                         const char *request_json,
                                         char **out_json);

/**
 * Input-form metadata, identical to `GET /api/schema`.
 */
char *seqtwin_schema_json(void);

/**
 * JSON error body from the last failed call on this thread, or null.
 * The pointer stays valid until the next library call on the same thread
 * and must not be freed.
 */
const char *seqtwin_last_error(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned by a `seqtwin_*` function that
 * transfers ownership, not yet freed.
 */
void seqtwin_string_free(char *s);

/**
 * Library version, static storage.
 */
const char *seqtwin_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQTWIN_H */
