#ifndef QTORHC_H
#define QTORHC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum {
  QTO_STATUS_OK = 0,
  QTO_STATUS_NULL_POINTER = 1,
  QTO_STATUS_INVALID_ARGUMENT = 2,
  QTO_STATUS_CONFIG = 3,
  QTO_STATUS_SYNTHESIS = 4,
  QTO_STATUS_SOLVER = 5,
  QTO_STATUS_INFEASIBLE = 6,
  QTO_STATUS_IO = 7,
  QTO_STATUS_BUFFER_TOO_SMALL = 8,
  QTO_STATUS_OUT_OF_RANGE = 9,
  QTO_STATUS_PANIC = 10,
} QtoStatus;

typedef struct QtoController QtoController;

typedef struct QtoRun QtoRun;

/**
 * Scalar outcome of one controller step.
 */
typedef struct {
  double t;
  double value;
  double horizon;
  double epsilon;
  double rho;
  bool in_box;
  double terminal_level;
} QtoStepInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *qto_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated and
 * NUL-terminated) and returns its full length, or 0 when there is none.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t qto_last_error_message(char *buf, size_t len);

/**
 * Builds a controller from scenario JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
QtoStatus qto_controller_from_json(const char *json, QtoController **out);

/**
 * Builds a controller from a scenario file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
QtoStatus qto_controller_from_file(const char *path, QtoController **out);

/**
 * # Safety
 * `ctl` must be null or a handle from this library not freed before.
 */
void qto_controller_free(QtoController *ctl);

/**
 * State and control dimensions.
 *
 * # Safety
 * All pointers must be valid.
 */
QtoStatus qto_controller_dims(const QtoController *ctl, size_t *n, size_t *m);

/**
 * Writes `K` (`m x n`), `H` (`n x n`) and `α`.
 *
 * # Safety
 * `gain` and `h` must hold `gain_len` and `h_len` doubles; `alpha` must be
 * valid.
 */
QtoStatus qto_controller_terminal(const QtoController *ctl,
                                  double *gain,
                                  size_t gain_len,
                                  double *h,
                                  size_t h_len,
                                  double *alpha);

/**
 * One sample: takes the measured state `x` (`n` entries), writes the
 * control to hold at the start of the next `δ` into `u` (`m` entries) and
 * the predicted state after `δ` into `x_next` (may be null).
 *
 * # Safety
 * Pointers must be valid for the given lengths; `info` may be null.
 */
QtoStatus qto_controller_step(QtoController *ctl,
                              const double *x,
                              size_t n,
                              double *u,
                              size_t m,
                              double *x_next,
                              QtoStepInfo *info);

/**
 * Restores the initial `ε`, `ρ` and sample counter.
 *
 * # Safety
 * `ctl` must be a valid handle.
 */
QtoStatus qto_controller_reset(QtoController *ctl);

/**
 * Simulates the closed loop from `x0` (the scenario's own `x0` when null)
 * with the controller's settings. The controller's own state is untouched.
 *
 * # Safety
 * `x0` must be null or hold `n` doubles; `out` must be valid.
 */
QtoStatus qto_controller_simulate(const QtoController *ctl,
                                  const double *x0,
                                  size_t n,
                                  QtoRun **out);

/**
 * # Safety
 * `run` must be null or a handle from this library not freed before.
 */
void qto_run_free(QtoRun *run);

/**
 * Number of recorded samples, 0 for a null handle.
 *
 * # Safety
 * `run` must be null or valid.
 */
size_t qto_run_len(const QtoRun *run);

/**
 * # Safety
 * `run` must be null or valid.
 */
bool qto_run_converged(const QtoRun *run);

/**
 * First time after which `‖x‖ ≤ threshold` holds for the rest of the run,
 * negative when the run never settles.
 *
 * # Safety
 * `run` must be valid.
 */
QtoStatus qto_run_settling_time(const QtoRun *run, double threshold, double *out);

/**
 * Sample `index`: its scalars into `info` and the measured state into `x`
 * (`n` entries, may be null).
 *
 * # Safety
 * `run` must be valid, `info` non-null, `x` null or holding `n` doubles.
 */
QtoStatus qto_run_sample(const QtoRun *run, size_t index, QtoStepInfo *info, double *x, size_t n);

/**
 * Runs a scenario file end to end, writing its run directory to
 * `out_dir`. `exit_code` receives the command-line exit status (0 clean,
 * 2 not converged, 1 invariant violations).
 *
 * # Safety
 * Strings must be NUL-terminated; `exit_code` must be valid.
 */
QtoStatus qto_run_scenario_file(const char *config_path, const char *out_dir, int32_t *exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QTORHC_H */
