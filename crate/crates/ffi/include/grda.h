#ifndef GRDA_H
#define GRDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GrdaStatus {
  GRDA_STATUS_OK = 0,
  GRDA_STATUS_NULL_POINTER = 1,
  GRDA_STATUS_INVALID_ARGUMENT = 2,
  GRDA_STATUS_NUMERIC = 3,
  GRDA_STATUS_IO = 4,
  GRDA_STATUS_CONFIG = 5,
  GRDA_STATUS_PANIC = 6,
} GrdaStatus;

typedef enum GrdaScheduleKind {
  GRDA_SCHEDULE_KIND_ZERO = 0,
  GRDA_SCHEDULE_KIND_RDA = 1,
  GRDA_SCHEDULE_KIND_POWER_LAW = 2,
  GRDA_SCHEDULE_KIND_SIM_POWER_LAW = 3,
} GrdaScheduleKind;

typedef enum GrdaPenaltyKind {
  GRDA_PENALTY_KIND_NONE = 0,
  GRDA_PENALTY_KIND_L1 = 1,
  GRDA_PENALTY_KIND_ELASTIC_NET = 2,
} GrdaPenaltyKind;

/**
 * Opaque optimizer state.
 */
typedef struct GrdaOptimizer GrdaOptimizer;

/**
 * Tuning schedule `g(n, γ)`. Fields not used by `kind` are ignored.
 */
typedef struct GrdaSchedule {
  enum GrdaScheduleKind kind;
  double c0;
  double c;
  double mu;
  double t0;
} GrdaSchedule;

typedef struct GrdaPenalty {
  enum GrdaPenaltyKind kind;
  double kappa;
} GrdaPenalty;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL.
 *
 * The pointer stays valid until the next `grda_*` call on the same thread.
 */
const char *grda_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *grda_version(void);

/**
 * Creates an optimizer at `w0` (length `d`).
 *
 * # Safety
 * `w0` must point to `d` readable doubles; `schedule`, `penalty` and `out`
 * must be valid pointers. Release the handle with [`grda_optimizer_free`].
 */
enum GrdaStatus grda_optimizer_new(const double *w0,
                                   size_t d,
                                   double gamma,
                                   const struct GrdaSchedule *schedule,
                                   const struct GrdaPenalty *penalty,
                                   struct GrdaOptimizer **out);

/**
 * One step with stochastic gradient `grad` (length `d`).
 *
 * # Safety
 * `opt` must come from [`grda_optimizer_new`]; `grad` must point to `d` doubles.
 */
enum GrdaStatus grda_optimizer_step(struct GrdaOptimizer *opt, const double *grad, size_t d);

/**
 * Copies the primal iterate into `out` (length `d`).
 *
 * # Safety
 * `opt` must be a live handle; `out` must point to `d` writable doubles.
 */
enum GrdaStatus grda_optimizer_weights(const struct GrdaOptimizer *opt, double *out, size_t d);

/**
 * Copies the dual accumulator into `out` (length `d`).
 *
 * # Safety
 * Same as [`grda_optimizer_weights`].
 */
enum GrdaStatus grda_optimizer_dual(const struct GrdaOptimizer *opt, double *out, size_t d);

/**
 * Number of steps taken so far.
 *
 * # Safety
 * `opt` must be a live handle and `out` a valid pointer.
 */
enum GrdaStatus grda_optimizer_steps(const struct GrdaOptimizer *opt, uint64_t *out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `opt` must come from [`grda_optimizer_new`] and not be used afterwards.
 */
void grda_optimizer_free(struct GrdaOptimizer *opt);

/**
 * `g(n, γ)` for the given schedule.
 *
 * # Safety
 * `schedule` and `out` must be valid pointers.
 */
enum GrdaStatus grda_tuning_value(const struct GrdaSchedule *schedule,
                                  uint64_t n,
                                  double gamma,
                                  double *out);

/**
 * Soft threshold `sgn(v)(|v| − λ)₊`.
 *
 * # Safety
 * `v` and `out` must point to `d` doubles; they may alias.
 */
enum GrdaStatus grda_prox_l1(const double *v, size_t d, double lambda, double *out);

/**
 * `(1 + κλ)⁻¹ sgn(v)(|v| − λ)₊`.
 *
 * # Safety
 * As [`grda_prox_l1`].
 */
enum GrdaStatus grda_prox_elastic_net(const double *v,
                                      size_t d,
                                      double lambda,
                                      double kappa,
                                      double *out);

/**
 * Group shrinkage `(1 − λ/‖v_a‖)₊ v_a`; `group_of[j]` is the group label of
 * coordinate `j`. Labels need not be contiguous.
 *
 * # Safety
 * `v`, `out` must point to `d` doubles and `group_of` to `d` labels.
 */
enum GrdaStatus grda_prox_group_lasso(const double *v,
                                      size_t d,
                                      double lambda,
                                      const size_t *group_of,
                                      double *out);

/**
 * Runs the experiment described by `config_json` and writes its CSV and
 * JSON reports into `out_dir` (created if missing).
 *
 * # Safety
 * Both arguments must be NUL-terminated UTF-8 strings.
 */
enum GrdaStatus grda_run_experiment(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRDA_H */
