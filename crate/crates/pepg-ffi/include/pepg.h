#ifndef PEPG_H
#define PEPG_H

/* Generated by cbindgen from crates/pepg-ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PepgStatus {
  PEPG_STATUS_OK = 0,
  // A required pointer argument was null.
  PEPG_STATUS_NULL_POINTER = 1,
  // A buffer length or index did not match.
  PEPG_STATUS_INVALID_ARGUMENT = 2,
  // Configuration text failed to parse or validate.
  PEPG_STATUS_CONFIG = 3,
  // A numerical routine failed (non-finite value, singular solve, no convergence).
  PEPG_STATUS_NUMERIC = 4,
  // File or serialization failure.
  PEPG_STATUS_IO = 5,
  // A Rust panic was caught.
  PEPG_STATUS_PANIC = 6,
} PepgStatus;

// An environment built from an `EnvSpec` document.
typedef struct PepgEnv PepgEnv;

// A finished training run.
typedef struct PepgRun PepgRun;

// One logged iteration; mirrors the CSV columns except `algo`.
typedef struct PepgRow {
  size_t iteration;
  uint64_t seed;
  double mc_return;
  double exact_value;
  double stability_l2;
  double grad_norm;
  double wall_ms;
} PepgRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. The pointer
// stays valid until the next failing call on the same thread.
const char *pepg_last_error_message(void);

// Clears the last-error message.
void pepg_clear_error(void);

// Library version as a static NUL-terminated string.
const char *pepg_version(void);

// Builds an environment from a TOML `EnvSpec` document (`type = "expfam" | "gridworld" | "static"`).
//
// # Safety
// `spec_toml` must be a NUL-terminated string and `out` a valid pointer.
enum PepgStatus pepg_env_from_toml(const char *spec_toml,
                                   struct PepgEnv **out);

// Releases an environment; null is ignored.
//
// # Safety
// `env` must come from [`pepg_env_from_toml`] and not be freed twice.
void pepg_env_free(struct PepgEnv *env);

// # Safety
// Pointers must be valid; `env` must be a live handle.
enum PepgStatus pepg_env_dims(const struct PepgEnv *env, size_t *n_states, size_t *n_actions);

// Exact performative value of the softmax policy with logits `theta`
// (`n_states * n_actions`, row-major), entropy weight `lambda`.
//
// # Safety
// `theta` must point to `len` doubles; `out` must be valid.
enum PepgStatus pepg_performative_value(const struct PepgEnv *env,
                                        const double *theta,
                                        size_t len,
                                        double lambda,
                                        double *out);

// Exact performative gradient at `theta`, written to `grad` (same length).
//
// # Safety
// `theta` and `grad` must each point to `len` doubles.
enum PepgStatus pepg_gradient(const struct PepgEnv *env,
                              const double *theta,
                              size_t len,
                              double lambda,
                              double *grad);

// Trains on `env` with a TOML `TrainConfig` document (empty string for defaults).
//
// # Safety
// `config_toml` must be NUL-terminated; `out` must be valid.
enum PepgStatus pepg_train(const struct PepgEnv *env,
                           const char *config_toml,
                           struct PepgRun **out);

// # Safety
// `run` must come from [`pepg_train`] and not be freed twice.
void pepg_run_free(struct PepgRun *run);

// Number of logged iterations; 0 for null.
//
// # Safety
// `run` must be null or a live handle.
size_t pepg_run_len(const struct PepgRun *run);

// 1 if the run stopped early, else 0.
//
// # Safety
// `run` must be null or a live handle.
int32_t pepg_run_aborted(const struct PepgRun *run);

// # Safety
// `run` must be a live handle and `out` valid.
enum PepgStatus pepg_run_row(const struct PepgRun *run, size_t index, struct PepgRow *out);

// Copies the final parameters into `out` (capacity `cap`) and stores the
// full length in `written`. Fails with `InvalidArgument` when `cap` is too small.
//
// # Safety
// `out` must point to `cap` doubles (may be null when `cap` is 0); `written` must be valid.
enum PepgStatus pepg_run_final_theta(const struct PepgRun *run,
                                     double *out,
                                     size_t cap,
                                     size_t *written);

// The run as CSV text; release with [`pepg_string_free`].
//
// # Safety
// `run` must be a live handle and `out` valid.
enum PepgStatus pepg_run_csv(const struct PepgRun *run, char **out);

// # Safety
// `s` must come from this library and not be freed twice.
void pepg_string_free(char *s);

// Runs a verification suite (`identities`, `inequalities` or `all`) on
// `instances` generated instances and counts passing and failing checks.
//
// # Safety
// `suite` must be NUL-terminated; `passed` and `failed` must be valid.
enum PepgStatus pepg_verify(const char *suite,
                            uint64_t seed,
                            size_t instances,
                            size_t *passed,
                            size_t *failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PEPG_H */
