#ifndef PROF_H
#define PROF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ProfArity {
  // `(obs, act, next)`
  PROF_ARITY_WITH_ACTION = 0,
  // `(obs, next)`
  PROF_ARITY_STATE_ONLY = 1,
} ProfArity;

typedef enum ProfFormat {
  // Pick from the file extension.
  PROF_FORMAT_AUTO = 0,
  PROF_FORMAT_BINARY_V1 = 1,
  PROF_FORMAT_TEXT_LINES = 2,
} ProfFormat;

typedef enum ProfStatus {
  PROF_STATUS_OK = 0,
  PROF_STATUS_NULL_POINTER = 1,
  PROF_STATUS_INVALID_ARGUMENT = 2,
  PROF_STATUS_DATA = 3,
  PROF_STATUS_COMPILE = 4,
  PROF_STATUS_EVAL = 5,
  PROF_STATUS_NOISE = 6,
  PROF_STATUS_PANIC = 99,
} ProfStatus;

typedef struct ProfDataset ProfDataset;

typedef struct ProfNoisySet ProfNoisySet;

typedef struct ProfReward ProfReward;

// Scalar summary of a dominance evaluation. Fractions and score are NaN
// when `valid` is false.
typedef struct ProfScore {
  bool valid;
  double score;
  double lambda;
  double frac_offline;
  double frac_noisy;
  uint64_t offline_hits;
  uint64_t noisy_hits;
  uint64_t n;
  uint64_t h;
} ProfScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. The pointer is
// valid until the next `prof_*` call on the same thread.
const char *prof_last_error(void);

// Library version as a static NUL-terminated string.
const char *prof_version(void);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ProfStatus prof_dataset_load(const char *path,
                                  enum ProfFormat format,
                                  struct ProfDataset **out);

// Top `k` trajectories by stored return, highest first.
//
// # Safety
// `ds` must be a live dataset handle and `out` a valid pointer.
enum ProfStatus prof_dataset_select_experts(const struct ProfDataset *ds,
                                            uintptr_t k,
                                            struct ProfDataset **out);

// Number of trajectories; 0 for NULL.
//
// # Safety
// `ds` must be NULL or a live dataset handle.
uintptr_t prof_dataset_len(const struct ProfDataset *ds);

// # Safety
// `ds` must be NULL or a live dataset handle.
uintptr_t prof_dataset_obs_dim(const struct ProfDataset *ds);

// # Safety
// `ds` must be NULL or a live dataset handle.
uintptr_t prof_dataset_act_dim(const struct ProfDataset *ds);

// # Safety
// `ds` must be NULL or a handle not yet freed.
void prof_dataset_free(struct ProfDataset *ds);

// Compiles a reward expression against the given dimensions.
//
// # Safety
// `source` must be a NUL-terminated string and `out` a valid pointer.
enum ProfStatus prof_reward_compile(const char *source,
                                    uintptr_t obs_dim,
                                    uintptr_t act_dim,
                                    enum ProfArity arity,
                                    struct ProfReward **out);

// Reward of one transition. `act` may be NULL with `act_len` 0 for
// state-only rewards.
//
// # Safety
// Each non-empty buffer must hold the stated number of doubles.
enum ProfStatus prof_reward_eval(const struct ProfReward *reward,
                                 const double *obs,
                                 uintptr_t obs_len,
                                 const double *act,
                                 uintptr_t act_len,
                                 const double *next,
                                 uintptr_t next_len,
                                 double *out);

// # Safety
// `reward` must be NULL or a handle not yet freed.
void prof_reward_free(struct ProfReward *reward);

// Perturbs the lowest-return trajectory of `experts` `h_count` times.
// With `on_demand` set members are regenerated per use instead of stored.
//
// # Safety
// `experts` must be a live dataset handle and `out` a valid pointer.
enum ProfStatus prof_noisy_synthesize(const struct ProfDataset *experts,
                                      double alpha_o,
                                      double alpha_a,
                                      uintptr_t h_count,
                                      uint64_t seed,
                                      bool on_demand,
                                      struct ProfNoisySet **out);

// # Safety
// `noisy` must be NULL or a live handle.
uintptr_t prof_noisy_len(const struct ProfNoisySet *noisy);

// Hex SHA-256 digest of the set, NUL-terminated. Valid while the handle
// lives.
//
// # Safety
// `noisy` must be NULL or a live handle.
enum ProfStatus prof_noisy_digest(const struct ProfNoisySet *noisy, char *buf, uintptr_t buf_len);

// # Safety
// `noisy` must be NULL or a handle not yet freed.
void prof_noisy_free(struct ProfNoisySet *noisy);

// Dominance score of `reward`. An evaluation failure is not an error:
// the call succeeds with `out->valid == false` and the reason in
// [`prof_last_error`].
//
// # Safety
// All handles must be live and `out` a valid pointer.
enum ProfStatus prof_dominance(const struct ProfReward *reward,
                               const struct ProfDataset *offline,
                               const struct ProfDataset *experts,
                               const struct ProfNoisySet *noisy,
                               double delta,
                               struct ProfScore *out);

// Min-max rescales `values` in place onto `[r_min_out, r_max_out]`.
//
// # Safety
// `values` must hold `len` writable doubles.
enum ProfStatus prof_rescale(double *values, uintptr_t len, double r_min_out, double r_max_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROF_H */
