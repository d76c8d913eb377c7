#ifndef PROMPT_DIFFUSER_H
#define PROMPT_DIFFUSER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Values per prompt step: return-to-go, two state and two action entries.
#define PD_PROMPT_STEP_WIDTH 5

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_ARGUMENT = 2,
  PD_STATUS_IO = 3,
  PD_STATUS_FORMAT = 4,
  PD_STATUS_NON_FINITE = 5,
  PD_STATUS_BUFFER_TOO_SMALL = 6,
  PD_STATUS_PANIC = 7,
} PdStatus;

typedef enum PdBranch {
  PD_BRANCH_CONFLICT = 0,
  PD_BRANCH_ALIGNED = 1,
} PdBranch;

// Trained prompt diffuser.
typedef struct PdDiffuser PdDiffuser;

// Pre-trained policy with its normalisation statistics.
typedef struct PdPlm PdPlm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *pd_last_error(void);

// Library version as a static nul-terminated string.
const char *pd_version(void);

// Loads a policy checkpoint that carries normalisation statistics.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum PdStatus pd_plm_load(const char *path, struct PdPlm **out);

// # Safety
// `plm` must come from [`pd_plm_load`] and not be used afterwards.
void pd_plm_free(struct PdPlm *plm);

// Loads a diffuser checkpoint.
//
// # Safety
// `path` must be a nul-terminated string and `out` a valid pointer.
enum PdStatus pd_diffuser_load(const char *path, struct PdDiffuser **out);

// # Safety
// `d` must come from [`pd_diffuser_load`] and not be used afterwards.
void pd_diffuser_free(struct PdDiffuser *d);

// Prompt length K of the diffuser, or 0 for a null handle.
//
// # Safety
// `d` must be null or a live handle.
size_t pd_diffuser_prompt_len(const struct PdDiffuser *d);

// Samples one normalised prompt conditioned on `target_rtg` (raw scale)
// into `out` as K rows of [`PD_PROMPT_STEP_WIDTH`] values
// `(rtg, s0, s1, a0, a1)`.
//
// # Safety
// Handles must be live; `out` must hold `out_len` doubles.
enum PdStatus pd_diffuser_sample(const struct PdDiffuser *d,
                                 const struct PdPlm *plm,
                                 double target_rtg,
                                 double temperature,
                                 uint64_t seed,
                                 double *out,
                                 size_t out_len);

// Runs `episodes` rollouts of the policy on task `task` of `family`
// (`"dir-1d"`, `"vel"` or `"dir-2d"`), prompted by a fresh diffuser sample
// or by nothing when `d` is null. Writes the mean and population standard
// deviation of the episode returns.
//
// # Safety
// `plm` must be live, `d` null or live, `family` nul-terminated and the
// output pointers valid.
enum PdStatus pd_evaluate(const struct PdPlm *plm,
                          const struct PdDiffuser *d,
                          const char *family,
                          size_t task,
                          double target_rtg,
                          double temperature,
                          size_t episodes,
                          uint64_t seed,
                          double *out_mean,
                          double *out_std);

// Component of `g_dt` orthogonal to `g_dm`, both of length `n`, into `out`.
//
// # Safety
// All three buffers must hold `n` doubles.
enum PdStatus pd_project(const double *g_dt, const double *g_dm, size_t n, double *out);

// Combined update direction of `g_dm` and `g_dt` with weight `lambda`
// into `out`; the branch taken is written to `branch` when non-null.
//
// # Safety
// All three buffers must hold `n` doubles; `branch` is null or valid.
enum PdStatus pd_combine(const double *g_dm,
                         const double *g_dt,
                         size_t n,
                         double lambda,
                         double *out,
                         enum PdBranch *branch);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROMPT_DIFFUSER_H */
