#ifndef DANGLESWEEP_H
#define DANGLESWEEP_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsStatus {
  DS_STATUS_OK = 0,
  DS_STATUS_NULL_ARGUMENT = 1,
  DS_STATUS_INVALID_UTF8 = 2,
  DS_STATUS_PARSE = 3,
  DS_STATUS_VALIDATION = 4,
  DS_STATUS_METADATA = 5,
  DS_STATUS_CONFIG = 6,
  DS_STATUS_PANIC = 7,
} DsStatus;

typedef enum DsVerdict {
  DS_VERDICT_PREVENTED = 0,
  DS_VERDICT_NOT_PREVENTED = 1,
  DS_VERDICT_NOT_APPLICABLE = 2,
} DsVerdict;

/**
 * A parsed and validated module.
 */
typedef struct DsModule DsModule;

typedef struct DsStats {
  uint64_t static_objects;
  uint64_t free_sites;
  uint64_t heap_pointers;
  uint64_t global_pointers;
  uint64_t stack_pointers;
} DsStats;

typedef struct DsRunOptions {
  bool protect;
  bool stack_protection;
  bool sync_sweep;
  uint32_t threads;
  /**
   * Zero keeps the default limit.
   */
  uint64_t step_limit;
} DsRunOptions;

typedef struct DsRunSummary {
  uint64_t steps;
  uint64_t allocs;
  uint64_t frees;
  uint64_t traps;
  uint64_t null_traps;
  uint64_t faults;
  uint64_t stale_reads;
  uint64_t stale_writes;
  uint64_t nullified;
} DsRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next call into this library on the same thread.
 */
const char *ds_last_error(void);

/**
 * Parse and validate NUL-terminated `.lir` source.
 *
 * # Safety
 * `source` must be a valid NUL-terminated string and `out` writable.
 */
enum DsStatus ds_module_parse(const char *source, struct DsModule **out);

/**
 * # Safety
 * `module` must come from [`ds_module_parse`] and not be freed yet, or be null.
 */
void ds_module_free(struct DsModule *module);

/**
 * # Safety
 * `s` must come from this library and not be freed yet, or be null.
 */
void ds_string_free(char *s);

/**
 * # Safety
 * `bytes` and `len` must come from [`ds_metadata_emit`], or `bytes` be null.
 */
void ds_bytes_free(uint8_t *bytes, size_t len);

/**
 * Points-to facts of both stages as text; free with [`ds_string_free`].
 *
 * # Safety
 * `module` must be a live handle and `out` writable.
 */
enum DsStatus ds_analyze_facts(const struct DsModule *module, char **out);

/**
 * Serialized metadata tables; free with [`ds_bytes_free`].
 *
 * # Safety
 * `module` must be a live handle; `out` and `out_len` writable.
 */
enum DsStatus ds_metadata_emit(const struct DsModule *module, uint8_t **out, size_t *out_len);

/**
 * Check that `bytes` is a well-formed metadata file built for `module`.
 *
 * # Safety
 * `module` must be a live handle and `bytes` readable for `len` bytes.
 */
enum DsStatus ds_metadata_check(const struct DsModule *module, const uint8_t *bytes, size_t len);

/**
 * # Safety
 * `module` must be a live handle and `out` writable.
 */
enum DsStatus ds_stats(const struct DsModule *module, struct DsStats *out);

/**
 * Default options: protected, stack protection on, asynchronous sweep,
 * one thread.
 */
struct DsRunOptions ds_run_options_default(void);

/**
 * Execute the module. Traps and faults are reported in the summary, not
 * as a failing status.
 *
 * # Safety
 * `module` must be a live handle, `options` readable and `out` writable.
 */
enum DsStatus ds_run(const struct DsModule *module,
                     const struct DsRunOptions *options,
                     struct DsRunSummary *out);

/**
 * # Safety
 * `module` must be a live handle and `out` writable.
 */
enum DsStatus ds_check_uaf(const struct DsModule *module,
                           bool stack_protection,
                           enum DsVerdict *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DANGLESWEEP_H */
