#ifndef EXITRATE_H
#define EXITRATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ExrStatus {
  EXR_STATUS_OK = 0,
  EXR_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument or configuration (CLI exit code 1).
   */
  EXR_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed or inconsistent data (CLI exit code 2).
   */
  EXR_STATUS_DATA_ERROR = 3,
  /**
   * Numeric failure (CLI exit code 3).
   */
  EXR_STATUS_NUMERIC_ERROR = 4,
  EXR_STATUS_PANIC = 5,
} ExrStatus;

typedef enum ExrSplit {
  EXR_SPLIT_CALIBRATION = 0,
  EXR_SPLIT_TRAIN = 1,
  EXR_SPLIT_TEST = 2,
} ExrSplit;

typedef enum ExrScoreFunction {
  EXR_SCORE_FUNCTION_RATE = 0,
  EXR_SCORE_FUNCTION_COSINE = 1,
} ExrScoreFunction;

/**
 * Incrementally assembled container, written with [`exr_builder_write`].
 */
typedef struct ExrBuilder ExrBuilder;

/**
 * A loaded activation container.
 */
typedef struct ExrDataset ExrDataset;

/**
 * A trained exit module (jumper plus text head).
 */
typedef struct ExrExitModule ExrExitModule;

/**
 * Per-class Gaussians of one layer.
 */
typedef struct ExrGaussians ExrGaussians;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *exr_version(void);

/**
 * Message of the last failure on this thread, or null if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *exr_last_error_message(void);

/**
 * Averages a row-major `tokens x dim` grid over tokens into `out[dim]`.
 *
 * # Safety
 * `grid` must point to `tokens * dim` doubles and `out` to `dim` doubles.
 */
enum ExrStatus exr_token_average(const double *grid, size_t tokens, size_t dim, double *out);

/**
 * Reads and validates the container at `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ExrStatus exr_dataset_read(const char *path, struct ExrDataset **out);

/**
 * # Safety
 * `ds` must come from `exr_dataset_read` and not be used afterwards.
 */
void exr_dataset_free(struct ExrDataset *ds);

/**
 * Writes the layer, sample, class and embedding counts. Any output pointer
 * may be null to skip it.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
enum ExrStatus exr_dataset_dims(const struct ExrDataset *ds,
                                size_t *num_layers,
                                size_t *num_samples,
                                size_t *num_classes,
                                size_t *embed_dim);

/**
 * Neuron count of 1-based `layer`.
 *
 * # Safety
 * `ds` must be a live dataset handle.
 */
enum ExrStatus exr_dataset_neurons(const struct ExrDataset *ds, size_t layer, size_t *out);

/**
 * # Safety
 * `ds` must be a live dataset handle.
 */
enum ExrStatus exr_dataset_label(const struct ExrDataset *ds, size_t sample, uint32_t *out);

/**
 * Copies the activation row of `sample` at 1-based `layer` into `out[len]`;
 * `len` must equal the layer's neuron count.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` must hold `len` doubles.
 */
enum ExrStatus exr_dataset_activation(const struct ExrDataset *ds,
                                      size_t layer,
                                      size_t sample,
                                      double *out,
                                      size_t len);

/**
 * Copies the `C x E` text embeddings, row-major, into `out[len]`.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` must hold `len` doubles.
 */
enum ExrStatus exr_dataset_text_embeddings(const struct ExrDataset *ds, double *out, size_t len);

/**
 * Starts a container with `classes` classes and `embed_dim`-wide text
 * embeddings.
 *
 * # Safety
 * `out` must be a writable pointer.
 */
enum ExrStatus exr_builder_new(size_t classes, size_t embed_dim, struct ExrBuilder **out);

/**
 * # Safety
 * `b` must come from `exr_builder_new` and not be used afterwards.
 */
void exr_builder_free(struct ExrBuilder *b);

/**
 * Sets name, description and unit-norm text embedding (`embed_dim`
 * doubles) of `class`.
 *
 * # Safety
 * Strings must be NUL-terminated; `text` must hold `embed_dim` doubles.
 */
enum ExrStatus exr_builder_set_class(struct ExrBuilder *b,
                                     size_t class_,
                                     const char *name,
                                     const char *description,
                                     const double *text);

/**
 * Appends the next layer as a row-major `samples x neurons` block.
 *
 * # Safety
 * `data` must hold `samples * neurons` doubles.
 */
enum ExrStatus exr_builder_add_layer(struct ExrBuilder *b,
                                     const double *data,
                                     size_t samples,
                                     size_t neurons);

/**
 * # Safety
 * `labels` must hold `len` values.
 */
enum ExrStatus exr_builder_set_labels(struct ExrBuilder *b, const uint32_t *labels, size_t len);

/**
 * # Safety
 * `indices` must hold `len` values.
 */
enum ExrStatus exr_builder_set_split(struct ExrBuilder *b,
                                     enum ExrSplit split,
                                     const size_t *indices,
                                     size_t len);

/**
 * Validates the assembled container and writes it to `dir`.
 *
 * # Safety
 * `b` must be a live builder and `dir` a NUL-terminated string.
 */
enum ExrStatus exr_builder_write(const struct ExrBuilder *b, const char *dir);

/**
 * Fits per-class Gaussians at 1-based `layer` from the first `cap` samples
 * per class of `split`.
 *
 * # Safety
 * `ds` must be a live dataset handle and `out` a writable pointer.
 */
enum ExrStatus exr_gaussians_fit(const struct ExrDataset *ds,
                                 size_t layer,
                                 enum ExrSplit split,
                                 size_t cap,
                                 struct ExrGaussians **out);

/**
 * Loads `gaussians_layer_<layer>` from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ExrStatus exr_gaussians_load(const char *dir, size_t layer, struct ExrGaussians **out);

/**
 * # Safety
 * `g` must come from this library and not be used afterwards.
 */
void exr_gaussians_free(struct ExrGaussians *g);

/**
 * # Safety
 * `g` must be a live handle; null outputs are skipped.
 */
enum ExrStatus exr_gaussians_dims(const struct ExrGaussians *g,
                                  size_t *num_classes,
                                  size_t *num_neurons);

/**
 * Class-rate of `act[n]` under every class, written to `rates[c]`.
 *
 * # Safety
 * `act` must hold `n` doubles and `rates` `c` doubles.
 */
enum ExrStatus exr_class_rate(const struct ExrGaussians *g,
                              const double *act,
                              size_t n,
                              double *rates,
                              size_t c);

/**
 * Class with the lowest rate for `act[n]`.
 *
 * # Safety
 * `act` must hold `n` doubles.
 */
enum ExrStatus exr_predict_by_rate(const struct ExrGaussians *g,
                                   const double *act,
                                   size_t n,
                                   size_t *out);

/**
 * Loads `exit_<layer>` from `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a writable pointer.
 */
enum ExrStatus exr_exit_module_load(const char *dir, size_t layer, struct ExrExitModule **out);

/**
 * # Safety
 * `em` must come from this library and not be used afterwards.
 */
void exr_exit_module_free(struct ExrExitModule *em);

/**
 * Exact number of parameters in the jumper and text head.
 *
 * # Safety
 * `em` must be a live handle.
 */
enum ExrStatus exr_exit_module_parameter_count(const struct ExrExitModule *em, size_t *out);

/**
 * Rate in bits of `act[n]` under the Gaussian predicted from `text[e]`.
 *
 * # Safety
 * `act` must hold `n` doubles and `text` `e` doubles.
 */
enum ExrStatus exr_exit_module_forward_rate(const struct ExrExitModule *em,
                                            const double *act,
                                            size_t n,
                                            const double *text,
                                            size_t e,
                                            double *out);

/**
 * Predicted class of `act[n]` given `c` row-major text embeddings of width
 * `e`.
 *
 * # Safety
 * `act` must hold `n` doubles and `text_embs` `c * e` doubles.
 */
enum ExrStatus exr_exit_module_predict(const struct ExrExitModule *em,
                                       const double *act,
                                       size_t n,
                                       const double *text_embs,
                                       size_t c,
                                       size_t e,
                                       enum ExrScoreFunction score,
                                       size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXITRATE_H */
