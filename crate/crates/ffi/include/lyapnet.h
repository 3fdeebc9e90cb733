#ifndef LYAPNET_H
#define LYAPNET_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum LyapStatus {
  LYAP_STATUS_OK = 0,
  LYAP_STATUS_NULL_POINTER = 1,
  LYAP_STATUS_INVALID_ARGUMENT = 2,
  LYAP_STATUS_BUFFER_TOO_SMALL = 3,
  LYAP_STATUS_SHAPE = 4,
  LYAP_STATUS_BUDGET = 5,
  LYAP_STATUS_NUMERIC = 6,
  LYAP_STATUS_IO = 7,
  LYAP_STATUS_FORMAT = 8,
  LYAP_STATUS_PANIC = 99,
} LyapStatus;

/**
 * Certificate for a layer chain; see [`lyap_certificate_new`].
 */
typedef struct LyapCertificate LyapCertificate;

/**
 * A model loaded from a checkpoint.
 */
typedef struct LyapModel LyapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `cap` bytes. Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t lyap_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lyap_version(void);

/**
 * Largest admissible `σ_max` for a layer budget.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LyapStatus lyap_spectral_cap(double delta, double nu, double *out);

/**
 * `sqrt((1/δ² + 2ν/δ)·ε)` for a global budget.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LyapStatus lyap_table_bound(double delta, double nu, double eps, double *out);

/**
 * `sqrt(1/δ² + 2ν/δ)·ε` for a global budget.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum LyapStatus lyap_corollary_bound(double delta, double nu, double eps, double *out);

/**
 * Builds and checks the certificate for `layers` budgets given as
 * parallel `deltas`/`nus` arrays.
 *
 * # Safety
 * `deltas` and `nus` must hold `layers` values; `out` must be valid.
 */
enum LyapStatus lyap_certificate_new(const double *deltas,
                                     const double *nus,
                                     size_t layers,
                                     double global_delta,
                                     double global_nu,
                                     bool strict,
                                     struct LyapCertificate **out);

/**
 * # Safety
 * `c` must be null or a handle from [`lyap_certificate_new`], freed once.
 */
void lyap_certificate_free(struct LyapCertificate *c);

/**
 * Overall verdict, and whether `-A` is quasi-dominant.
 *
 * # Safety
 * `c` must be a live certificate; outputs must be valid or null.
 */
enum LyapStatus lyap_certificate_status(const struct LyapCertificate *c,
                                        bool *passed,
                                        bool *quasi_dominant);

/**
 * Per-layer caps; NaN where a layer has none. Writes `layers` values.
 *
 * # Safety
 * `c` must be a live certificate and `out` hold `cap` doubles.
 */
enum LyapStatus lyap_certificate_caps(const struct LyapCertificate *c, double *out, size_t cap);

/**
 * Side of the square matrix `-A` (layers + 1).
 *
 * # Safety
 * `c` must be a live certificate and `out` valid.
 */
enum LyapStatus lyap_certificate_side(const struct LyapCertificate *c, size_t *out);

/**
 * `-A` in row-major order, `side * side` values.
 *
 * # Safety
 * `c` must be a live certificate and `out` hold `cap` doubles.
 */
enum LyapStatus lyap_certificate_neg_matrix(const struct LyapCertificate *c,
                                            double *out,
                                            size_t cap);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be valid.
 */
enum LyapStatus lyap_model_load(const char *path, struct LyapModel **out);

/**
 * # Safety
 * `m` must be null or a handle from [`lyap_model_load`], freed once.
 */
void lyap_model_free(struct LyapModel *m);

/**
 * Flattened input and output widths of one sample.
 *
 * # Safety
 * `m` must be a live model; outputs must be valid or null.
 */
enum LyapStatus lyap_model_dims(const struct LyapModel *m, size_t *input_len, size_t *output_len);

/**
 * The 32-byte configuration digest stored with the checkpoint.
 *
 * # Safety
 * `m` must be a live model and `out` hold 32 bytes.
 */
enum LyapStatus lyap_model_digest(const struct LyapModel *m, uint8_t *out);

/**
 * Forward pass on `batch` samples laid out row-major. Writes
 * `batch * output_len` logits.
 *
 * # Safety
 * `input` must hold `batch * input_len` floats and `out` `cap` floats.
 */
enum LyapStatus lyap_model_predict(const struct LyapModel *m,
                                   const float *input,
                                   size_t batch,
                                   float *out,
                                   size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LYAPNET_H */
