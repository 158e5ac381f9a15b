#ifndef VOCSPOOF_H
#define VOCSPOOF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_IO = 3,
  VS_STATUS_FORMAT = 4,
  VS_STATUS_NON_FINITE = 5,
  VS_STATUS_INTERNAL = 6,
} VsStatus;

// Trained countermeasure.
typedef struct VsCm VsCm;

// Pretrained, continually trained or student encoder.
typedef struct VsEncoder VsEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next failing call.
const char *vs_last_error(void);

// Frames produced for an input of `num_samples` samples.
size_t vs_num_frames(size_t num_samples);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VsStatus vs_encoder_load(const char *path, struct VsEncoder **out);

// # Safety
// `enc` must come from [`vs_encoder_load`] and not be used afterwards; null is ignored.
void vs_encoder_free(struct VsEncoder *enc);

// Feature dimension, or 0 for a null handle.
//
// # Safety
// `enc` must be null or a live handle.
size_t vs_encoder_dim(const struct VsEncoder *enc);

// Encodes 16 kHz samples into `out`, row-major `frames x dim`.
// `out_len` must be at least `vs_num_frames(n) * dim`.
//
// # Safety
// `samples` must point to `n` values and `out` to `out_len` writable values.
enum VsStatus vs_encoder_encode(const struct VsEncoder *enc,
                                const double *samples,
                                size_t n,
                                double *out,
                                size_t out_len,
                                size_t *out_frames);

// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum VsStatus vs_cm_load(const char *path, struct VsCm **out);

// # Safety
// `cm` must come from [`vs_cm_load`] and not be used afterwards; null is ignored.
void vs_cm_free(struct VsCm *cm);

// Bona fide score of one utterance; higher means more likely bona fide.
//
// # Safety
// `samples` must point to `n` values.
enum VsStatus vs_cm_score(const struct VsCm *cm, const double *samples, size_t n, double *out);

// Equal error rate (fraction) and its threshold.
//
// # Safety
// `bona` and `spoof` must point to `n_bona` and `n_spoof` values.
enum VsStatus vs_compute_eer(const double *bona,
                             size_t n_bona,
                             const double *spoof,
                             size_t n_spoof,
                             double *out_eer,
                             double *out_threshold);

// Mean over `n` frames of the L1 distance between `z` and `|x - x_tilde|`.
// All three inputs are row-major `n x d`.
//
// # Safety
// `x`, `x_tilde` and `z` must each point to `n * d` values.
enum VsStatus vs_distillation_loss(const double *x,
                                   const double *x_tilde,
                                   const double *z,
                                   size_t n,
                                   size_t d,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOCSPOOF_H */
