#ifndef TMIFPE_H
#define TMIFPE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define TMIFPE_SCENARIO_UU 0

#define TMIFPE_SCENARIO_US 1

#define TMIFPE_SCENARIO_TU 2

#define TMIFPE_SCENARIO_TS 3

#define TMIFPE_LOSS_CE 0

#define TMIFPE_LOSS_CW 1

#define TMIFPE_LOSS_DLR 2

#define TMIFPE_LOSS_MIFPE 3

#define TMIFPE_LOSS_TMIFPE 4

#define TMIFPE_MODE_UNTARGETED 0

#define TMIFPE_MODE_TARGETED 1

#define TMIFPE_NORM_LINF 0

#define TMIFPE_NORM_L2 1

// `target` value in [`TmifpeAttackConfig`] selecting the runner-up rule.
#define TMIFPE_TARGET_RUNNER_UP -1

typedef enum TmifpeStatus {
  TMIFPE_STATUS_OK = 0,
  TMIFPE_STATUS_NULL_POINTER = 1,
  TMIFPE_STATUS_INVALID_ARGUMENT = 2,
  TMIFPE_STATUS_UNSUPPORTED_PRECISION = 3,
  TMIFPE_STATUS_DEGENERATE_GAP = 4,
  TMIFPE_STATUS_SCENARIO_MISMATCH = 5,
  TMIFPE_STATUS_SHAPE_MISMATCH = 6,
  TMIFPE_STATUS_IO = 7,
  TMIFPE_STATUS_FORMAT = 8,
  TMIFPE_STATUS_BUFFER_TOO_SMALL = 9,
  TMIFPE_STATUS_INTERNAL = 10,
} TmifpeStatus;

// Opaque model handle.
typedef struct TmifpeModel TmifpeModel;

typedef struct TmifpeSolution {
  double t_star;
  double c_star;
  double g_at_star;
  // `δ_sup(t*)` in the requested precision.
  double delta_sup;
  double residual;
  uint32_t iterations;
  // 1 when the clamp at `t = 1` overrides the underflow bound.
  uint8_t underflow_at_star;
  // 0 for bisection, 1 for the clamped formula.
  uint8_t method;
} TmifpeSolution;

typedef struct TmifpeAttackConfig {
  uint32_t norm;
  float eps;
  uint32_t iterations;
  float momentum;
  uint32_t loss;
  uint32_t mode;
  uint64_t seed;
  // Random-start stream; use the sample index for dataset runs.
  uint64_t stream;
  uint32_t precision;
  // A class index, or `TMIFPE_TARGET_RUNNER_UP`.
  int64_t target;
} TmifpeAttackConfig;

typedef struct TmifpeAttackResult {
  uint8_t success;
  uint8_t clean_correct;
  // −1 when no iterate succeeded.
  int64_t first_success_iteration;
  double final_norm;
  uint32_t zero_gradient_steps;
} TmifpeAttackResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread (empty after a success).
// The pointer stays valid until the next library call on the same thread.
const char *tmifpe_last_error(void);

// Machine epsilon and underflow exponent of a 16, 32 or 64-bit format.
//
// # Safety
// `eps_max` and `lambda` must be valid for writes.
enum TmifpeStatus tmifpe_profile(uint32_t bits, double *eps_max, double *lambda);

// Rounds `x` to the given precision and back.
//
// # Safety
// `result` must be valid for writes.
enum TmifpeStatus tmifpe_round(double x, uint32_t bits, double *result);

// `g(t)` for the scenario `scenario` with `label` (true label or target).
//
// # Safety
// `logits` must point to `classes` doubles; `result` must be valid for writes.
enum TmifpeStatus tmifpe_g_value(const double *logits,
                                 size_t classes,
                                 uint32_t scenario,
                                 size_t label,
                                 double t,
                                 double *result);

// `g'(t)`, arguments as for [`tmifpe_g_value`].
//
// # Safety
// As for [`tmifpe_g_value`].
enum TmifpeStatus tmifpe_g_derivative(const double *logits,
                                      size_t classes,
                                      uint32_t scenario,
                                      size_t label,
                                      double t,
                                      double *result);

// Optimal scale `t*` for the scenario in the given precision.
//
// # Safety
// `logits` must point to `classes` doubles; `solution` must be valid for writes.
enum TmifpeStatus tmifpe_solve_t_star(const double *logits,
                                      size_t classes,
                                      uint32_t scenario,
                                      size_t label,
                                      uint32_t bits,
                                      struct TmifpeSolution *solution);

// Cosine step size `ε (1 + cos(π i / I))`. Returns NaN when `iterations` is 0.
double tmifpe_step_size(uint32_t i, uint32_t iterations, double eps);

// Attack surrogate value and its logit gradient (`gradient` holds `classes`
// doubles).
//
// # Safety
// `logits` and `gradient` must point to `classes` doubles; `value` must be
// valid for writes.
enum TmifpeStatus tmifpe_loss_evaluate(uint32_t loss,
                                       uint32_t mode,
                                       const double *logits,
                                       size_t classes,
                                       size_t label,
                                       uint32_t bits,
                                       double *value,
                                       double *gradient);

// Seeded He-initialized dense model with rectified hidden layers.
//
// # Safety
// `widths` must point to `count` values; `model` must be valid for writes.
enum TmifpeStatus tmifpe_model_init(const size_t *widths,
                                    size_t count,
                                    uint64_t seed,
                                    struct TmifpeModel **model);

// Loads a weights manifest written by `tmifpe train` or [`tmifpe_model_save`].
//
// # Safety
// `path` must be a NUL-terminated string; `model` must be valid for writes.
enum TmifpeStatus tmifpe_model_load(const char *path, struct TmifpeModel **model);

// # Safety
// `model` must be a live handle; `path` a NUL-terminated string.
enum TmifpeStatus tmifpe_model_save(const struct TmifpeModel *model,
                                    const char *path,
                                    uint64_t seed);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must be null or a handle not yet freed.
void tmifpe_model_free(struct TmifpeModel *model);

// Input width of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t tmifpe_model_input_width(const struct TmifpeModel *model);

// Number of classes, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t tmifpe_model_classes(const struct TmifpeModel *model);

// # Safety
// `x` must point to `width` floats and `logits` to `classes` floats.
enum TmifpeStatus tmifpe_model_forward(const struct TmifpeModel *model,
                                       const float *x,
                                       size_t width,
                                       float *logits,
                                       size_t classes);

// Default attack settings: ℓ∞, ε = 0.3, 100 iterations, momentum 0.75,
// untargeted T-MIFPE, seed 0, 32-bit.
struct TmifpeAttackConfig tmifpe_attack_config_default(void);

// Runs PGD on one input. `x_best` (`width` floats) receives the retained
// adversarial example.
//
// # Safety
// Pointers must be valid for the stated lengths.
enum TmifpeStatus tmifpe_attack(const struct TmifpeModel *model,
                                const float *x,
                                size_t width,
                                size_t label,
                                const struct TmifpeAttackConfig *config,
                                float *x_best,
                                struct TmifpeAttackResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TMIFPE_H */
