#ifndef MABN_H
#define MABN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MabnStatus {
  MABN_STATUS_OK = 0,
  MABN_STATUS_NULL_ARGUMENT = 1,
  MABN_STATUS_INVALID_ARGUMENT = 2,
  MABN_STATUS_IO = 3,
  MABN_STATUS_CORRUPT_FILE = 4,
  MABN_STATUS_SHAPE_MISMATCH = 5,
  MABN_STATUS_SCOPE_VIOLATION = 6,
  MABN_STATUS_NON_FINITE = 7,
  MABN_STATUS_PANIC = 8,
  MABN_STATUS_OTHER = 9,
} MabnStatus;

typedef enum MabnScope {
  // Adapt gamma and beta with frozen running statistics.
  MABN_SCOPE_AFFINE_ONLY = 0,
  // Also re-estimate running statistics from the support set.
  MABN_SCOPE_FULL_BN = 1,
} MabnScope;

// A multi-domain dataset loaded from an `MABD` file.
typedef struct MabnDataset MabnDataset;

// A trained or adapted network.
typedef struct MabnModel MabnModel;

typedef struct MabnAdaptOptions {
  // Inner learning rate.
  double alpha;
  uint32_t steps;
  enum MabnScope scope;
  // Support rows drawn per target domain by `mabn_evaluate`.
  uint32_t support_size;
  uint64_t seed;
} MabnAdaptOptions;

typedef struct MabnMetrics {
  double accuracy;
  double macro_f1;
  double worst_case_accuracy;
  uint64_t n_samples;
} MabnMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *mabn_version(void);

// Message of the last failed call on this thread, empty after a success.
// Valid until the next call into this library on the same thread.
const char *mabn_last_error(void);

// Loads a checkpoint into a new handle stored in `*out`.
//
// # Safety
// `path` is a NUL-terminated string and `out` a writable pointer.
enum MabnStatus mabn_model_load(const char *path, struct MabnModel **out);

// # Safety
// `model` is a live handle and `path` a NUL-terminated string.
enum MabnStatus mabn_model_save(const struct MabnModel *model, const char *path);

// Releases a handle; null is ignored.
//
// # Safety
// `model` is null or a handle not yet freed.
void mabn_model_free(struct MabnModel *model);

// Writes the 64-hex-digit weight hash plus a NUL into `buf` (at least 65 bytes).
//
// # Safety
// `model` is a live handle and `buf` holds `len` writable bytes.
enum MabnStatus mabn_model_theta_hash(const struct MabnModel *model, char *buf, uintptr_t len);

// Number of `double` values in one input sample, and the number of classes.
//
// # Safety
// `model` is a live handle; the outputs are writable.
enum MabnStatus mabn_model_dims(const struct MabnModel *model,
                                uintptr_t *sample_len,
                                uintptr_t *num_classes);

// Adapts a copy of `model` on `n` unlabeled support rows and stores it in
// `*out`. `model` is unchanged.
//
// # Safety
// `model` is a live handle, `support` holds `n` samples, `opts` and `out`
// are valid pointers.
enum MabnStatus mabn_model_adapt(const struct MabnModel *model,
                                 const double *support,
                                 uintptr_t n,
                                 const struct MabnAdaptOptions *opts,
                                 struct MabnModel **out);

// Predicted class of each of `n` rows, written to `labels`.
//
// # Safety
// `model` is a live handle, `x` holds `n` samples and `labels` `n` slots.
enum MabnStatus mabn_model_predict(const struct MabnModel *model,
                                   const double *x,
                                   uintptr_t n,
                                   uint32_t *labels);

// # Safety
// `path` is a NUL-terminated string and `out` a writable pointer.
enum MabnStatus mabn_dataset_load(const char *path, struct MabnDataset **out);

// # Safety
// `dataset` is null or a handle not yet freed.
void mabn_dataset_free(struct MabnDataset *dataset);

// Evaluates `model` on the test split of every target domain. With
// non-null `opts`, each domain is first adapted on a support set drawn from
// its train split; otherwise the model is used as is.
//
// # Safety
// `model` and `dataset` are live handles, `opts` is null or valid, `out`
// is writable.
enum MabnStatus mabn_evaluate(const struct MabnModel *model,
                              const struct MabnDataset *dataset,
                              const struct MabnAdaptOptions *opts,
                              struct MabnMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MABN_H */
