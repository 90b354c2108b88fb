#ifndef KINETIC_DLR_H
#define KINETIC_DLR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

// Result codes shared by every function of the C interface.
typedef enum KdlrStatus {
  KDLR_STATUS_OK = 0,
  KDLR_STATUS_NULL_POINTER = 1,
  KDLR_STATUS_INVALID_ARGUMENT = 2,
  KDLR_STATUS_SHAPE_MISMATCH = 3,
  KDLR_STATUS_NUMERICAL = 4,
  KDLR_STATUS_CONFIG = 5,
  KDLR_STATUS_IO = 6,
  // The output buffer is shorter than the required length, which is
  // still written to `*written`.
  KDLR_STATUS_BUFFER_TOO_SMALL = 7,
  // The schedule is exhausted; no step was taken.
  KDLR_STATUS_FINISHED = 8,
  KDLR_STATUS_PANIC = 9,
} KdlrStatus;

// A validated problem description.
typedef struct KdlrProblem KdlrProblem;

// A running solver: the current field plus its position in the schedule.
typedef struct KdlrSolver KdlrSolver;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into this library on the same thread.
const char *kdlr_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *kdlr_version(void);

// Create a problem from a preset name such as `example1_kinetic`.
//
// # Safety
// `name` must be a NUL-terminated string; `out` must be writable.
enum KdlrStatus kdlr_problem_preset(const char *name, struct KdlrProblem **out);

// Create a problem from flat TOML text (same format as spec files).
//
// # Safety
// `text` must be a NUL-terminated string; `out` must be writable.
enum KdlrStatus kdlr_problem_from_toml(const char *text, struct KdlrProblem **out);

// Apply one `key=value` override. Each call validates the whole problem,
// so lower `rank` before shrinking a grid. The problem is unchanged on failure.
//
// # Safety
// `problem` must come from this library; `assignment` must be NUL-terminated.
enum KdlrStatus kdlr_problem_set(struct KdlrProblem *problem, const char *assignment);

// # Safety
// `problem` must come from this library and not be used afterwards. Null is ignored.
void kdlr_problem_free(struct KdlrProblem *problem);

// Set up the initial data and step schedule of `problem`.
//
// # Safety
// `problem` must come from this library; `out` must be writable.
enum KdlrStatus kdlr_solver_new(const struct KdlrProblem *problem, struct KdlrSolver **out);

// Take the next scheduled step; `KDLR_STATUS_FINISHED` once the schedule is done.
//
// # Safety
// `solver` must come from this library.
enum KdlrStatus kdlr_solver_step(struct KdlrSolver *solver);

// Take every remaining step.
//
// # Safety
// `solver` must come from this library.
enum KdlrStatus kdlr_solver_run(struct KdlrSolver *solver);

// Current time and number of steps taken (either output may be null).
//
// # Safety
// `solver` must come from this library; non-null outputs must be writable.
enum KdlrStatus kdlr_solver_progress(const struct KdlrSolver *solver, double *time, size_t *steps);

// Total number of steps in the schedule.
//
// # Safety
// `solver` must come from this library; `out` must be writable.
enum KdlrStatus kdlr_solver_schedule_len(const struct KdlrSolver *solver, size_t *out);

// Copy the density `ρᵢ` (length `n_x`) into `out`. `*written` receives
// the required length even when the buffer is too small.
//
// # Safety
// `solver` must come from this library; `out` must hold `len` doubles.
enum KdlrStatus kdlr_solver_density(const struct KdlrSolver *solver,
                                    double *out,
                                    size_t len,
                                    size_t *written);

// Singular values in decreasing order: of `S` for low-rank modes, of the
// full field for the reference mode. Empty in diffusion mode.
//
// # Safety
// `solver` must come from this library; `out` must hold `len` doubles.
enum KdlrStatus kdlr_solver_singular_values(const struct KdlrSolver *solver,
                                            double *out,
                                            size_t len,
                                            size_t *written);

// # Safety
// `solver` must come from this library and not be used afterwards. Null is ignored.
void kdlr_solver_free(struct KdlrSolver *solver);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KINETIC_DLR_H */
