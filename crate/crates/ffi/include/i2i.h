#ifndef I2I_H
#define I2I_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum i2i_status {
  I2I_STATUS_OK = 0,
  I2I_STATUS_NULL_POINTER = 1,
  I2I_STATUS_INVALID_ARGUMENT = 2,
  I2I_STATUS_FORMAT = 3,
  I2I_STATUS_IO = 4,
  I2I_STATUS_DIGEST_MISMATCH = 5,
  I2I_STATUS_CONFIG = 6,
  I2I_STATUS_AUDIT = 7,
  // No value: the metric or field is undefined for this input.
  I2I_STATUS_UNAVAILABLE = 8,
  // The caller's buffer is too small; `needed` holds the required size.
  I2I_STATUS_BUFFER_TOO_SMALL = 9,
  I2I_STATUS_OUT_OF_RANGE = 10,
  I2I_STATUS_PANIC = 11,
  I2I_STATUS_INTERNAL = 12,
} i2i_status;

// A checkpoint read from disk.
typedef struct i2i_checkpoint i2i_checkpoint;

// A continual-learning run record.
typedef struct i2i_record i2i_record;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *i2i_version(void);

// Message of the last failure on this thread. Valid until the next failing
// call on the same thread; empty when nothing failed yet.
const char *i2i_last_error(void);

// Reads and verifies a checkpoint. Free the handle with
// `i2i_checkpoint_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum i2i_status i2i_checkpoint_read(const char *path, struct i2i_checkpoint **out);

// # Safety
// `handle` must come from `i2i_checkpoint_read` and not be used afterwards.
void i2i_checkpoint_free(struct i2i_checkpoint *handle);

// # Safety
// `handle` must be a live checkpoint handle; `out` writable.
enum i2i_status i2i_checkpoint_block_count(const struct i2i_checkpoint *handle, size_t *out);

// Number of scalars in blocks whose name starts with `prefix` (all blocks
// when `prefix` is null or empty).
//
// # Safety
// `handle` must be a live checkpoint handle, `prefix` null or
// NUL-terminated, `out` writable.
enum i2i_status i2i_checkpoint_param_count(const struct i2i_checkpoint *handle,
                                           const char *prefix,
                                           size_t *out);

// Hex SHA-256 of the checkpoint file (64 characters).
//
// # Safety
// `handle` must be a live checkpoint handle; `buf` must hold `cap` bytes.
enum i2i_status i2i_checkpoint_sha256(const struct i2i_checkpoint *handle,
                                      char *buf,
                                      size_t cap,
                                      size_t *needed);

// Reads and validates a run record. Free with `i2i_record_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum i2i_status i2i_record_read(const char *path, struct i2i_record **out);

// # Safety
// `handle` must come from `i2i_record_read` and not be used afterwards.
void i2i_record_free(struct i2i_record *handle);

// # Safety
// `handle` must be a live record handle; `out` writable.
enum i2i_status i2i_record_task_count(const struct i2i_record *handle, size_t *out);

// Task id at run position `index` (0-based).
//
// # Safety
// `handle` must be a live record handle; `buf` must hold `cap` bytes.
enum i2i_status i2i_record_task_id(const struct i2i_record *handle,
                                   size_t index,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed);

// Final validation exact match (percent) of the task at `index`.
//
// # Safety
// `handle` must be a live record handle; `out` writable.
enum i2i_status i2i_record_score(const struct i2i_record *handle, size_t index, double *out);

// Overall knowledge transfer of the run; `Unavailable` when the run has no
// vanilla reference.
//
// # Safety
// `handle` must be a live record handle; `out` writable.
enum i2i_status i2i_record_overall_transfer(const struct i2i_record *handle, double *out);

// `100·(s_f − s_a)/s_a`.
//
// # Safety
// `out` must be writable.
enum i2i_status i2i_knowledge_transfer(double s_f, double s_a, double *out);

// Mean of `len` per-task transfers.
//
// # Safety
// `values` must point to `len` doubles; `out` writable.
enum i2i_status i2i_overall_transfer(const double *values, size_t len, double *out);

// `100·(s_f − s_phi)/s_f`.
//
// # Safety
// `out` must be writable.
enum i2i_status i2i_distillation_decay(double s_f, double s_phi, double *out);

// Mean relative gain of the final phase over the distilled start, from
// paired arrays of `len` scores.
//
// # Safety
// `after2` and `after3` must each point to `len` doubles; `out` writable.
enum i2i_status i2i_phase3_gain(const double *after2,
                                const double *after3,
                                size_t len,
                                double *out);

// Cosine similarity of two vectors of `len` doubles.
//
// # Safety
// `a` and `b` must each point to `len` doubles; `out` writable.
enum i2i_status i2i_cosine(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* I2I_H */
