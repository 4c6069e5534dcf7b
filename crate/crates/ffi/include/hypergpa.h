#ifndef HYPERGPA_H
#define HYPERGPA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HgpaStatus {
  HGPA_STATUS_OK = 0,
  HGPA_STATUS_NULL_POINTER = 1,
  HGPA_STATUS_INVALID_UTF8 = 2,
  HGPA_STATUS_CONFIG = 3,
  HGPA_STATUS_SHAPE = 4,
  HGPA_STATUS_INVALID_ARGUMENT = 5,
  HGPA_STATUS_IO = 6,
  HGPA_STATUS_PARSE = 7,
  HGPA_STATUS_RUNTIME = 8,
  HGPA_STATUS_BUFFER_TOO_SMALL = 9,
  HGPA_STATUS_PANIC = 10,
} HgpaStatus;

/**
 * A set of `series × periods` blocks of `period_len × dim` values.
 */
typedef struct HgpaCorpus HgpaCorpus;

/**
 * A trained forecaster of any method.
 */
typedef struct HgpaModel HgpaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; never null. Valid
 * until the next failing call on the same thread.
 */
const char *hgpa_last_error(void);

const char *hgpa_version(void);

/**
 * Builds the corpus described by a run configuration (TOML text, or null
 * for the default synthetic corpus).
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `out` is writable.
 */
enum HgpaStatus hgpa_corpus_from_config(const char *config_toml, struct HgpaCorpus **out);

/**
 * Copies `series * periods * period_len * dim` values laid out series,
 * then period, then time step, then feature.
 *
 * # Safety
 * `values` points to that many readable doubles; `out` is writable.
 */
enum HgpaStatus hgpa_corpus_from_values(const double *values,
                                        size_t series,
                                        size_t periods,
                                        size_t period_len,
                                        size_t dim,
                                        struct HgpaCorpus **out);

/**
 * Z-scores each series in place with statistics of its training periods
 * (all but the last two), as the command line does before training.
 *
 * # Safety
 * `corpus` is a live handle.
 */
enum HgpaStatus hgpa_corpus_normalize(struct HgpaCorpus *corpus);

/**
 * # Safety
 * `corpus` is a live handle; the out pointers are writable.
 */
enum HgpaStatus hgpa_corpus_shape(const struct HgpaCorpus *corpus,
                                  size_t *series,
                                  size_t *periods,
                                  size_t *dim);

/**
 * # Safety
 * `corpus` is null or a handle not yet freed.
 */
void hgpa_corpus_free(struct HgpaCorpus *corpus);

/**
 * Trains the configured method (`method`, `arch`, optimizer sections of
 * the TOML; null for defaults) on `corpus` as given.
 *
 * # Safety
 * `config_toml` is null or NUL-terminated; `corpus` is live; `out` is writable.
 */
enum HgpaStatus hgpa_model_train(const char *config_toml,
                                 const struct HgpaCorpus *corpus,
                                 uint64_t seed,
                                 struct HgpaModel **out);

/**
 * # Safety
 * `model` is live; `path` is NUL-terminated.
 */
enum HgpaStatus hgpa_model_save(const struct HgpaModel *model, const char *path);

/**
 * # Safety
 * `path` is NUL-terminated; `out` is writable.
 */
enum HgpaStatus hgpa_model_load(const char *path, struct HgpaModel **out);

/**
 * Writes forecasts of every window in period `target`, series-major, each
 * series `pairs × s_out × dim`. With `out` null only `written` is set, to
 * the required length.
 *
 * # Safety
 * `model` and `corpus` are live; `out` is null or has `capacity` writable
 * doubles; `written` is writable.
 */
enum HgpaStatus hgpa_model_forecast(const struct HgpaModel *model,
                                    const struct HgpaCorpus *corpus,
                                    size_t target,
                                    double *out,
                                    size_t capacity,
                                    size_t *written);

/**
 * Pooled MSE of the model's forecasts on the last period.
 *
 * # Safety
 * `model` and `corpus` are live; `mse` is writable.
 */
enum HgpaStatus hgpa_model_test_mse(const struct HgpaModel *model,
                                    const struct HgpaCorpus *corpus,
                                    double *mse);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void hgpa_model_free(struct HgpaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERGPA_H */
