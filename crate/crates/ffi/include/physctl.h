#ifndef PHYSCTL_H
#define PHYSCTL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible call.
 */
typedef enum PhysctlStatus {
  /**
   * Success.
   */
  PhysctlOk = 0,
  /**
   * A pointer argument was null.
   */
  PhysctlNullPointer = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  PhysctlInvalidUtf8 = 2,
  /**
   * Invalid argument or internal contract violation.
   */
  PhysctlInvalid = 3,
  /**
   * Tensor shape or dimension mismatch.
   */
  PhysctlShape = 4,
  /**
   * Mathematical domain error (e.g. correlation of a constant image).
   */
  PhysctlDomain = 5,
  /**
   * Malformed file format.
   */
  PhysctlFormat = 6,
  /**
   * Configuration rejected.
   */
  PhysctlConfig = 7,
  /**
   * I/O failure.
   */
  PhysctlIo = 8,
} PhysctlStatus;

/**
 * Opaque handle around a validated run configuration.
 */
typedef struct PhysctlConfig PhysctlConfig;

/**
 * Outcome summary of a control-loop run.
 */
typedef struct PhysctlRunResult {
  /**
   * 1 if the target metric was reached within budget, 0 otherwise.
   */
  uint8_t reached_threshold;
  /**
   * Outer iterations actually executed.
   */
  uintptr_t iterations;
  /**
   * Mean Pearson correlation at the last executed iteration.
   */
  double final_pearson;
  /**
   * Mean sigma distance at the last executed iteration.
   */
  double final_sigma;
} PhysctlRunResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's most recent error message into `buf`
 * (NUL-terminated, truncated to `cap` bytes). Returns the full message
 * length in bytes, excluding the terminator. `buf` may be null to query the
 * required capacity.
 *
 * # Safety
 * `buf`, when non-null, must point to at least `cap` writable bytes.
 */
uintptr_t physctl_last_error(char *buf, uintptr_t cap);

/**
 * Load and validate a TOML run configuration from `path`. On success writes
 * a new handle to `out`; release it with [`physctl_config_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum PhysctlStatus physctl_config_load(const char *path, struct PhysctlConfig **out);

/**
 * Parse and validate a TOML run configuration from an in-memory string.
 * Relative target paths resolve against the current working directory.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum PhysctlStatus physctl_config_parse(const char *toml, struct PhysctlConfig **out);

/**
 * Override the run seed on a loaded configuration.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum PhysctlStatus physctl_config_set_seed(struct PhysctlConfig *cfg, uint64_t seed);

/**
 * Override the outer-iteration budget on a loaded configuration.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum PhysctlStatus physctl_config_set_max_outer_iters(struct PhysctlConfig *cfg,
                                                      uintptr_t max_outer_iters);

/**
 * Release a configuration handle. Passing null is a no-op.
 *
 * # Safety
 * `cfg` must be null or a live handle from this library; the handle is
 * invalid afterwards.
 */
void physctl_config_free(struct PhysctlConfig *cfg);

/**
 * Execute the full control loop for `cfg` without writing any artifacts.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be a valid pointer.
 */
enum PhysctlStatus physctl_run(const struct PhysctlConfig *cfg, struct PhysctlRunResult *out);

/**
 * Run the finite-difference gradient suite. Writes the number of failing
 * checks to `failures` (0 means every gradient matched).
 *
 * # Safety
 * `failures` must be a valid pointer.
 */
enum PhysctlStatus physctl_gradcheck(uint64_t seed, uintptr_t *failures);

/**
 * Pearson correlation between two equally sized vectors.
 *
 * # Safety
 * `a` and `b` must point to `len` readable doubles; `out` must be valid.
 */
enum PhysctlStatus physctl_pearson2d(const double *a, const double *b, uintptr_t len, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PHYSCTL_H */
