#ifndef JSCE_H
#define JSCE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum JsceProfile {
  JSCE_PROFILE_DESK = 0,
  JSCE_PROFILE_PAPER = 1,
} JsceProfile;

typedef enum JsceStatus {
  JSCE_STATUS_OK = 0,
  JSCE_STATUS_NULL_POINTER = 1,
  JSCE_STATUS_INVALID_UTF8 = 2,
  JSCE_STATUS_INVALID_ARGUMENT = 3,
  JSCE_STATUS_CONFIG = 4,
  JSCE_STATUS_NUMERICAL = 5,
  JSCE_STATUS_IO = 6,
  JSCE_STATUS_OUT_OF_RANGE = 7,
  JSCE_STATUS_PANIC = 8,
} JsceStatus;

typedef enum JsceScheme {
  JSCE_SCHEME_AS_TVBI = 0,
  JSCE_SCHEME_TP_OMP = 1,
  JSCE_SCHEME_TP_SBL = 2,
  JSCE_SCHEME_SP_TVBI = 3,
  JSCE_SCHEME_GENIE = 4,
} JsceScheme;

typedef struct JsceConfig JsceConfig;

typedef struct JsceSweep JsceSweep;

// One Monte-Carlo trial. `nmse_blocks` follows the block order
// ITS, CTS, ITB, CTB, BNL, INL, BL, IL.
typedef struct JsceTrial {
  uint64_t seed;
  enum JsceScheme scheme;
  double p_t_dbm;
  uint64_t n_p;
  uint64_t overlap;
  double gamma_o;
  bool failed;
  double nmse;
  double nmse_blocks[8];
  double rmse;
  double rmse_targets;
  double rmse_scatterers;
  double rmse_user;
  uint64_t iterations_phase1;
  uint64_t iterations_phase2;
  uint64_t rcg_iterations;
  double crb_objective;
} JsceTrial;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *jsce_version(void);

// Copies the last error message of this thread into `buf` (truncated, always
// NUL-terminated when `len > 0`) and returns the full message length
// excluding the terminator. Returns 0 when no error is recorded.
//
// # Safety
// `buf` must be null or valid for writes of `len` bytes.
uintptr_t jsce_last_error(char *buf, uintptr_t len);

// New configuration with the defaults of `profile`. Never returns null.
struct JsceConfig *jsce_config_new(enum JsceProfile profile);

// Parses a TOML experiment configuration into `*out`.
//
// # Safety
// `text` must be a NUL-terminated string and `out` valid for a pointer write.
enum JsceStatus jsce_config_from_toml(const char *text, struct JsceConfig **out);

// # Safety
// `cfg` must be null or a handle from this library not yet freed.
void jsce_config_free(struct JsceConfig *cfg);

// Seeds `start..end` (half open).
//
// # Safety
// `cfg` must be a live configuration handle.
enum JsceStatus jsce_config_set_seeds(struct JsceConfig *cfg, uint64_t start, uint64_t end);

// # Safety
// `cfg` must be a live configuration handle and `schemes` valid for `n` reads.
enum JsceStatus jsce_config_set_schemes(struct JsceConfig *cfg,
                                        const enum JsceScheme *schemes,
                                        uintptr_t n);

// Transmit powers in dBm.
//
// # Safety
// `cfg` must be a live configuration handle and `dbm` valid for `n` reads.
enum JsceStatus jsce_config_set_power(struct JsceConfig *cfg, const double *dbm, uintptr_t n);

// Runs every (point, seed, scheme) trial of `cfg`. Individual trial failures
// are recorded in the result rather than reported here.
//
// # Safety
// `cfg` must be a live configuration handle and `out` valid for a pointer write.
enum JsceStatus jsce_run_sweep(const struct JsceConfig *cfg, struct JsceSweep **out);

// Number of trials, or 0 for a null handle.
//
// # Safety
// `sweep` must be null or a live sweep handle.
uintptr_t jsce_sweep_len(const struct JsceSweep *sweep);

// # Safety
// `sweep` must be a live sweep handle and `out` valid for a write.
enum JsceStatus jsce_sweep_trial(const struct JsceSweep *sweep,
                                 uintptr_t index,
                                 struct JsceTrial *out);

// Writes the per-trial CSV (same columns as the CLI's trials.csv).
//
// # Safety
// `sweep` must be a live sweep handle and `path` a NUL-terminated string.
enum JsceStatus jsce_sweep_write_csv(const struct JsceSweep *sweep, const char *path);

// # Safety
// `sweep` must be null or a handle from this library not yet freed.
void jsce_sweep_free(struct JsceSweep *sweep);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JSCE_H */
