#ifndef CTS_H
#define CTS_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CtsArch {
  CTS_ARCH_TINY_MLP = 0,
  CTS_ARCH_MLP2X256 = 1,
  CTS_ARCH_LENET_CONV4 = 2,
  CTS_ARCH_RESNET_TINY = 3,
} CtsArch;

typedef enum CtsController {
  CTS_CONTROLLER_GRAD_BALANCE = 0,
  CTS_CONTROLLER_LAGRANGE = 1,
} CtsController;

typedef enum CtsObjective {
  CTS_OBJECTIVE_TASK_LOSS = 0,
  CTS_OBJECTIVE_REL_LOSS_CHANGE = 1,
  CTS_OBJECTIVE_NEG_GRAD_NORM = 2,
  CTS_OBJECTIVE_REVERSE_KL = 3,
  CTS_OBJECTIVE_FEATURE_MATCH = 4,
  CTS_OBJECTIVE_GRAD_MATCH = 5,
} CtsObjective;

// Result code of every fallible call.
typedef enum CtsStatus {
  CTS_STATUS_OK = 0,
  CTS_STATUS_NULL_POINTER = 1,
  CTS_STATUS_INVALID_ARGUMENT = 2,
  CTS_STATUS_IO = 3,
  CTS_STATUS_PARSE = 4,
  CTS_STATUS_NUMERICAL = 5,
  CTS_STATUS_BUDGET_EXCEEDED = 6,
  CTS_STATUS_FAILED = 7,
  CTS_STATUS_PANIC = 8,
} CtsStatus;

// A dataset with train and test splits.
typedef struct CtsDataset CtsDataset;

// Network weights.
typedef struct CtsModel CtsModel;

// A binary mask over the maskable weights.
typedef struct CtsTicket CtsTicket;

// Settings for one search run. Start from `cts_search_params_default`.
typedef struct CtsSearchParams {
  // Target density in (0, 1].
  double kappa;
  enum CtsObjective objective;
  enum CtsController controller;
  size_t search_steps;
  // Total training steps.
  size_t train_steps;
  // Step whose weights the ticket is drawn from and rewound to.
  size_t rewind_step;
  size_t batch_size;
  // Constant SGD learning rate.
  double learning_rate;
  uint64_t seed;
} CtsSearchParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cts_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library on the same thread.
const char *cts_last_error(void);

struct CtsSearchParams cts_search_params_default(void);

// Gaussian blobs with flat samples of length `dim`, split 80/20.
//
// # Safety
// `out_dataset` must be a valid pointer to writable storage for a handle.
enum CtsStatus cts_dataset_blobs(size_t classes,
                                 size_t dim,
                                 size_t n,
                                 uint64_t seed,
                                 struct CtsDataset **out_dataset);

// Gaussian blobs viewed as `channels × height × width` images, for the
// convolutional architectures.
//
// # Safety
// `out_dataset` must be a valid pointer to writable storage for a handle.
enum CtsStatus cts_dataset_blobs_image(size_t classes,
                                       size_t channels,
                                       size_t height,
                                       size_t width,
                                       size_t n,
                                       uint64_t seed,
                                       struct CtsDataset **out_dataset);

// # Safety
// `dataset` must be NULL or a handle from this library not yet freed.
void cts_dataset_free(struct CtsDataset *dataset);

// Freshly initialized weights for `arch` sized to `dataset`.
//
// # Safety
// Handles must be live; `out_model` must be writable.
enum CtsStatus cts_model_new(enum CtsArch arch_id,
                             const struct CtsDataset *dataset,
                             uint64_t seed,
                             struct CtsModel **out_model);

// Loads weights from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string; `out_model` must be writable.
enum CtsStatus cts_model_load(const char *file, struct CtsModel **out_model);

// Writes weights to a checkpoint file, tagged with `step`.
//
// # Safety
// `model` must be live; `path` must be a NUL-terminated string.
enum CtsStatus cts_model_save(const struct CtsModel *model, const char *file, uint64_t step);

// Number of maskable weights `d`.
//
// # Safety
// `model` must be live; `out_d` must be writable.
enum CtsStatus cts_model_maskable_count(const struct CtsModel *model, size_t *out_d);

// Test-split loss and accuracy, with `ticket` applied when not NULL.
//
// # Safety
// Handles must be live or NULL where allowed; outputs must be writable.
enum CtsStatus cts_model_evaluate(const struct CtsModel *model,
                                  const struct CtsDataset *dataset,
                                  const struct CtsTicket *ticket,
                                  double *out_loss,
                                  double *out_accuracy);

// # Safety
// `model` must be NULL or a handle from this library not yet freed.
void cts_model_free(struct CtsModel *model);

// Pre-trains to the rewind step, searches, clamps the ticket and retrains
// it. Returns the ticket, the retrained model and its test accuracy. Either
// output handle pointer may be NULL when not wanted.
//
// # Safety
// Handles must be live; `params` must point to a valid struct.
enum CtsStatus cts_search(const struct CtsDataset *dataset,
                          enum CtsArch arch_id,
                          const struct CtsSearchParams *params,
                          struct CtsTicket **out_ticket,
                          struct CtsModel **out_model,
                          double *out_test_accuracy);

// Exhaustive search over every mask with `round(kappa · d)` ones, scored on
// the first `batch` training samples.
//
// # Safety
// Handles must be live; outputs must be writable.
enum CtsStatus cts_oracle(const struct CtsModel *model,
                          const struct CtsDataset *dataset,
                          double kappa,
                          enum CtsObjective objective_id,
                          size_t batch,
                          struct CtsTicket **out_ticket,
                          double *out_best_value);

// # Safety
// `path` must be a NUL-terminated string; `out_ticket` must be writable.
enum CtsStatus cts_ticket_load(const char *file, struct CtsTicket **out_ticket);

// # Safety
// `ticket` must be live; `path` must be a NUL-terminated string.
enum CtsStatus cts_ticket_save(const struct CtsTicket *ticket, const char *file);

// Mask length `d`, or 0 for NULL.
//
// # Safety
// `ticket` must be NULL or live.
size_t cts_ticket_len(const struct CtsTicket *ticket);

// Number of retained weights, or 0 for NULL.
//
// # Safety
// `ticket` must be NULL or live.
size_t cts_ticket_retained(const struct CtsTicket *ticket);

// Achieved density, or NaN for NULL.
//
// # Safety
// `ticket` must be NULL or live.
double cts_ticket_density(const struct CtsTicket *ticket);

// Copies the mask as 0/1 bytes into `buf`, which must hold `len` bytes
// with `len` equal to `cts_ticket_len`.
//
// # Safety
// `buf` must point to `len` writable bytes.
enum CtsStatus cts_ticket_copy_mask(const struct CtsTicket *ticket, uint8_t *buf, size_t len);

// # Safety
// `ticket` must be NULL or a handle from this library not yet freed.
void cts_ticket_free(struct CtsTicket *ticket);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTS_H */
