#ifndef SPLATRIG_H
#define SPLATRIG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SrPriorMode {
  SR_PRIOR_MODE_LEARNABLE = 0,
  SR_PRIOR_MODE_FIXED = 1,
  SR_PRIOR_MODE_NONE = 2,
} SrPriorMode;

typedef enum SrSplit {
  SR_SPLIT_TRAIN = 0,
  SR_SPLIT_SETTING1 = 1,
  SR_SPLIT_SETTING2 = 2,
} SrSplit;

typedef enum SrStatus {
  SR_STATUS_OK = 0,
  SR_STATUS_IO = 1,
  SR_STATUS_LOAD = 2,
  SR_STATUS_SCHEMA = 3,
  SR_STATUS_SHAPE = 4,
  SR_STATUS_ARGUMENT = 5,
  SR_STATUS_USAGE = 6,
  SR_STATUS_INIT = 7,
  SR_STATUS_TRAINING = 8,
  SR_STATUS_NULL_POINTER = 9,
  SR_STATUS_PANIC = 10,
} SrStatus;

/*
 A loaded dataset directory.
 */
typedef struct SrDataset SrDataset;

/*
 A trained model loaded from a checkpoint.
 */
typedef struct SrModel SrModel;

/*
 Training state bound to the dataset it was created from.
 */
typedef struct SrTrainer SrTrainer;

/*
 Aggregate metrics of one evaluated split.
 */
typedef struct SrEvalSummary {
  double psnr;
  double ssim;
  double psnr_masked;
  double ssim_masked;
  size_t frames;
} SrEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *sr_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sr_version(void);

/*
 Writes a synthetic dataset to `out_dir`. Zero width/height keep the default size.
 */
enum SrStatus sr_synth(const char *out_dir, uint64_t seed, size_t width, size_t height);

enum SrStatus sr_dataset_open(const char *path, struct SrDataset **out);

void sr_dataset_free(struct SrDataset *ds);

enum SrStatus sr_dataset_frame_count(const struct SrDataset *ds, size_t *out);

/*
 Creates a trainer with default settings apart from the given fields.
 */
enum SrStatus sr_trainer_new(const struct SrDataset *ds,
                             enum SrPriorMode mode,
                             uint64_t seed,
                             uint64_t iterations,
                             struct SrTrainer **out);

void sr_trainer_free(struct SrTrainer *t);

/*
 Runs one iteration; `loss` (optional) receives the weighted total.
 */
enum SrStatus sr_trainer_step(struct SrTrainer *t, const struct SrDataset *ds, double *loss);

enum SrStatus sr_trainer_gaussian_count(const struct SrTrainer *t, size_t *out);

enum SrStatus sr_trainer_save(const struct SrTrainer *t,
                              const struct SrDataset *ds,
                              const char *dir);

enum SrStatus sr_model_load(const char *dir, struct SrModel **out);

void sr_model_free(struct SrModel *m);

enum SrStatus sr_model_gaussian_count(const struct SrModel *m, size_t *out);

enum SrStatus sr_model_expression_count(const struct SrModel *m, size_t *out);

/*
 Image size of camera `camera_index` from the checkpoint's camera table.
 */
enum SrStatus sr_model_camera_size(const struct SrModel *m,
                                   size_t camera_index,
                                   size_t *width,
                                   size_t *height);

/*
 Renders `(exp, pose)` from a stored camera into `rgb`, row-major
 interleaved RGB floats in [0, 1]; `rgb_len` must equal 3·W·H.
 */
enum SrStatus sr_model_render(const struct SrModel *m,
                              const double *exp,
                              size_t exp_len,
                              const double *pose,
                              size_t camera_index,
                              float *rgb,
                              size_t rgb_len);

enum SrStatus sr_model_evaluate(const struct SrModel *m,
                                const struct SrDataset *ds,
                                enum SrSplit which,
                                struct SrEvalSummary *out);

/*
 PSNR of two interleaved RGB images of `width·height` pixels. `mask` may be
 NULL; otherwise it holds one byte per pixel, nonzero = selected.
 */
enum SrStatus sr_psnr(const float *pred,
                      const float *gt,
                      size_t width,
                      size_t height,
                      const uint8_t *mask,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLATRIG_H */
