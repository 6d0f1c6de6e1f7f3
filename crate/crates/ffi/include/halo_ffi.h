#ifndef HALO_FFI_H
#define HALO_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HaloDetector {
  HALO_DETECTOR_MSP = 0,
  HALO_DETECTOR_ENTROPY = 1,
  HALO_DETECTOR_ENERGY = 2,
  HALO_DETECTOR_GEN = 3,
} HaloDetector;

typedef enum HaloDirection {
  HALO_DIRECTION_ID_TO_OOD = 0,
  HALO_DIRECTION_OOD_TO_ID = 1,
} HaloDirection;

/**
 * Result code of every fallible call.
 */
typedef enum HaloStatus {
  HALO_STATUS_OK = 0,
  HALO_STATUS_NULL_POINTER = 1,
  HALO_STATUS_INVALID_ARGUMENT = 2,
  HALO_STATUS_DIMENSION = 3,
  HALO_STATUS_IO = 4,
  HALO_STATUS_PARSE = 5,
  HALO_STATUS_CONFIG = 6,
  HALO_STATUS_CONTRACT = 7,
  HALO_STATUS_BUFFER_TOO_SMALL = 8,
  HALO_STATUS_PANIC = 9,
} HaloStatus;

/**
 * Opaque model handle.
 */
typedef struct HaloModel HaloModel;

/**
 * PGD parameters for `halo_detection_attack`. Null `box_lo`/`box_hi`
 * leave the input space unbounded; otherwise each points to either one
 * value or `input_dim` values, as given by `box_len`.
 */
typedef struct HaloAttackParams {
  double epsilon;
  size_t steps;
  double step_size;
  bool random_init;
  uint64_t seed;
  const double *box_lo;
  const double *box_hi;
  size_t box_len;
} HaloAttackParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *halo_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next `halo_*` call on the same thread.
 */
const char *halo_last_error_message(void);

/**
 * Loads a `halo-ckpt-v1` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HaloStatus halo_model_load(const char *path, struct HaloModel **out);

/**
 * Freshly initialized model with the given layer sizes.
 *
 * # Safety
 * `layer_sizes` must point to `n_layers` values and `out` be valid.
 */
enum HaloStatus halo_model_init(const size_t *layer_sizes,
                                size_t n_layers,
                                uint64_t seed,
                                struct HaloModel **out);

/**
 * Writes the model as a checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum HaloStatus halo_model_save(const struct HaloModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void halo_model_free(struct HaloModel *model);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t halo_model_input_dim(const struct HaloModel *model);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t halo_model_num_classes(const struct HaloModel *model);

/**
 * Logits for `n_rows` row-major inputs into `out` (`n_rows × K`).
 *
 * # Safety
 * `x` must hold `n_rows × input_dim` values and `out` `out_len` values.
 */
enum HaloStatus halo_model_forward(const struct HaloModel *model,
                                   const double *x,
                                   size_t n_rows,
                                   double *out,
                                   size_t out_len);

/**
 * OOD scores (higher = more OOD) for `n_rows` inputs. `detector` is a
 * [`HaloDetector`] value. GEN uses γ = 0.1 and M = min(K, 100).
 *
 * # Safety
 * `x` must hold `n_rows × input_dim` values and `out` `out_len` values.
 */
enum HaloStatus halo_score(const struct HaloModel *model,
                           uint32_t detector,
                           const double *x,
                           size_t n_rows,
                           double *out,
                           size_t out_len);

/**
 * Uniformity-targeting PGD attack; adversarial inputs go to `out`.
 * `direction` is a [`HaloDirection`] value.
 *
 * # Safety
 * `params` must be valid; `x` and `out` must hold `n_rows × input_dim`
 * values (`out_len` for `out`); box pointers as documented on
 * [`HaloAttackParams`].
 */
enum HaloStatus halo_detection_attack(const struct HaloModel *model,
                                      const struct HaloAttackParams *params,
                                      uint32_t direction,
                                      const double *x,
                                      size_t n_rows,
                                      double *out,
                                      size_t out_len);

/**
 * AUROC with OOD as the positive class, ties counted one half.
 *
 * # Safety
 * Score pointers must hold the given counts; `out` must be valid.
 */
enum HaloStatus halo_auroc(const double *id,
                           size_t n_id,
                           const double *ood,
                           size_t n_ood,
                           double *out);

/**
 * FPR at the given TPR (0.95 for FPR95).
 *
 * # Safety
 * Score pointers must hold the given counts; `out` must be valid.
 */
enum HaloStatus halo_fpr_at_tpr(const double *id,
                                size_t n_id,
                                const double *ood,
                                size_t n_ood,
                                double tpr,
                                double *out);

/**
 * AUPR with OOD as the positive class.
 *
 * # Safety
 * Score pointers must hold the given counts; `out` must be valid.
 */
enum HaloStatus halo_aupr(const double *id,
                          size_t n_id,
                          const double *ood,
                          size_t n_ood,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HALO_FFI_H */
