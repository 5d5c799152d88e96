#ifndef REGUIDE_H
#define REGUIDE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RgStatus {
  RG_STATUS_OK = 0,
  RG_STATUS_NULL_POINTER = 1,
  RG_STATUS_INVALID_ARGUMENT = 2,
  RG_STATUS_LOAD = 3,
  RG_STATUS_COMPUTE = 4,
  RG_STATUS_PANIC = 5,
} RgStatus;

typedef enum RgMode {
  RG_MODE_THEOREM3 = 0,
  RG_MODE_UNWEIGHTED = 1,
  RG_MODE_OFF = 2,
} RgMode;

typedef struct RgDenoiser RgDenoiser;

typedef struct RgIndex RgIndex;

typedef struct RgReward RgReward;

/**
 * Sampling options. `steps == 0` runs every timestep and `clip <= 0`
 * disables gradient clipping.
 */
typedef struct RgSampleOptions {
  double mu;
  double eta;
  double cfg_scale;
  size_t steps;
  enum RgMode mode;
  double clip;
  uint64_t seed;
} RgSampleOptions;

typedef struct RgMoments {
  double oracle_mean;
  double oracle_var;
  double chain_mean;
  double chain_var;
  double empirical_mean;
  double empirical_var;
  bool passed;
} RgMoments;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap - 1` bytes). Returns the full message
 * length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t rg_last_error_message(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rg_version(void);

/**
 * Loads a denoiser checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum RgStatus rg_denoiser_load(const char *path, struct RgDenoiser **out);

/**
 * # Safety
 * `h` must be null or a handle from [`rg_denoiser_load`] not yet freed.
 */
void rg_denoiser_free(struct RgDenoiser *h);

/**
 * Loads a reward model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum RgStatus rg_reward_load(const char *path, struct RgReward **out);

/**
 * # Safety
 * `h` must be null or a handle from [`rg_reward_load`] not yet freed.
 */
void rg_reward_free(struct RgReward *h);

/**
 * Number of frames and coordinates per frame the reward model expects.
 *
 * # Safety
 * `h` must be a live reward handle; the outputs must be valid for writes.
 */
enum RgStatus rg_reward_shape(const struct RgReward *h, size_t *n_frames, size_t *dim);

/**
 * Loads a retrieval index.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writes.
 */
enum RgStatus rg_index_load(const char *path, struct RgIndex **out);

/**
 * # Safety
 * `h` must be null or a handle from [`rg_index_load`] not yet freed.
 */
void rg_index_free(struct RgIndex *h);

/**
 * Text-to-motion reward `mu * R_T(x_t, c)` at step `t` and, when `grad` is
 * non-null, its gradient with respect to `x` (`len` values, row-major).
 *
 * # Safety
 * `x` and `grad` (if non-null) must hold `len` values, `params` three
 * values and `value` must be valid for writes.
 */
enum RgStatus rg_reward_eval(const struct RgReward *h,
                             const double *x,
                             size_t len,
                             size_t t,
                             uint32_t class_id,
                             const double *params,
                             double mu,
                             double *value,
                             double *grad);

/**
 * Draws one guided sample for a condition into `out` (`len` values).
 * `reward` may be null when guidance is off; `index` is required when
 * `opts.eta != 0`.
 *
 * # Safety
 * Handles must be live or null, `params` must hold three values, `opts`
 * must be valid for reads and `out` must hold `len` values.
 */
enum RgStatus rg_sample(const struct RgDenoiser *denoiser,
                        const struct RgReward *reward,
                        const struct RgIndex *index,
                        uint32_t class_id,
                        const double *params,
                        const struct RgSampleOptions *opts,
                        double *out,
                        size_t len);

/**
 * One-dimensional analytic check: prior N(mean, var), reward
 * `-lambda (x - target)^2`, `samples` draws over `steps` sampling steps
 * (0 for every timestep of the default schedule).
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum RgStatus rg_verify_analytic(double mean,
                                 double var,
                                 double target,
                                 double lambda,
                                 size_t samples,
                                 size_t steps,
                                 enum RgMode mode,
                                 uint64_t seed,
                                 struct RgMoments *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REGUIDE_H */
