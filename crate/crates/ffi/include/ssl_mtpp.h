#ifndef SSL_MTPP_H
#define SSL_MTPP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SslStatus {
  SSL_STATUS_OK = 0,
  // A required pointer argument was null.
  SSL_STATUS_NULL_POINTER = 1,
  // A string was not UTF-8, or a numeric argument was out of range.
  SSL_STATUS_INVALID_ARGUMENT = 2,
  // Input data, configuration or split was rejected.
  SSL_STATUS_VALIDATION = 3,
  SSL_STATUS_IO = 4,
  // Training or evaluation failed while running.
  SSL_STATUS_RUNTIME = 5,
  SSL_STATUS_PANIC = 6,
} SslStatus;

// A trained network with its feature scaler and configuration.
typedef struct SslModel SslModel;

// A loaded or generated sequence pool.
typedef struct SslPool SslPool;

// Synthetic generator settings. Class priors are passed separately.
typedef struct SslGeneratorConfig {
  size_t sequences;
  size_t num_classes;
  double base_intensity;
  double excitation;
  double decay;
  double mean_length;
  double coupling;
  size_t window;
} SslGeneratorConfig;

typedef struct SslMetrics {
  double avg_precision;
  double avg_precision_ranked;
  double macro_f1;
  double micro_f1;
  double accuracy;
  double time_mae;
  double time_mae_raw;
  uint64_t events;
} SslMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ssl_version(void);

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *ssl_last_error(void);

// Fills `out` with the default generator settings.
//
// # Safety
// `out` must be null or point to writable memory for one `SslGeneratorConfig`.
enum SslStatus ssl_generator_config_default(struct SslGeneratorConfig *out);

// Generates a synthetic pool. With `num_priors == 0` the class priors are the defaults.
//
// # Safety
// `config` must point to a valid config, `priors` to `num_priors` doubles, and
// `out` to writable storage for one handle.
enum SslStatus ssl_pool_generate(const struct SslGeneratorConfig *config,
                                 const double *priors,
                                 size_t num_priors,
                                 uint64_t seed,
                                 struct SslPool **out);

// Loads a JSON-lines pool file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable storage for one handle.
enum SslStatus ssl_pool_load(const char *path, size_t num_classes, struct SslPool **out);

// # Safety
// `pool` must be a live handle and `path` a NUL-terminated string.
enum SslStatus ssl_pool_save(const struct SslPool *pool, const char *path);

// # Safety
// `pool` must be null or a handle not yet freed.
void ssl_pool_free(struct SslPool *pool);

// Number of sequences; 0 for a null handle.
//
// # Safety
// `pool` must be null or a live handle.
size_t ssl_pool_len(const struct SslPool *pool);

// Total number of events; 0 for a null handle.
//
// # Safety
// `pool` must be null or a live handle.
size_t ssl_pool_events(const struct SslPool *pool);

// Writes `P-k.json` for each budget and `test.json` into `out_dir`.
//
// # Safety
// `pool` must be a live handle, `budgets` must point to `num_budgets` values,
// and `out_dir` must be a NUL-terminated string.
enum SslStatus ssl_splits_write(const struct SslPool *pool,
                                const size_t *budgets,
                                size_t num_budgets,
                                size_t test_events,
                                uint64_t seed,
                                const char *out_dir);

// Trains on the split at `split_path`. `config_toml` holds training settings
// in the CLI config-file format; null means all defaults.
//
// # Safety
// `pool` must be a live handle, the strings NUL-terminated (or null for
// `config_toml`), and `out` writable storage for one handle.
enum SslStatus ssl_train(const struct SslPool *pool,
                         const char *split_path,
                         const char *config_toml,
                         struct SslModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable storage for one handle.
enum SslStatus ssl_model_load(const char *path, struct SslModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum SslStatus ssl_model_save(const struct SslModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void ssl_model_free(struct SslModel *model);

// Number of marker classes; 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t ssl_model_num_classes(const struct SslModel *model);

// Evaluates on the test part of the split at `split_path`.
//
// # Safety
// `model` and `pool` must be live handles, `split_path` NUL-terminated and
// `out` writable.
enum SslStatus ssl_model_evaluate(const struct SslModel *model,
                                  const struct SslPool *pool,
                                  const char *split_path,
                                  struct SslMetrics *out);

// Next-event predictions for one sequence of `len` events.
//
// Entry `t` of `markers_out` / `gaps_out` predicts event `t` from events
// before it; entry 0 has no history and is set to -1 / NaN. Gaps are in the
// original time units. Either output may be null.
//
// # Safety
// `times` and `markers` must point to `len` values; non-null outputs must
// have room for `len` values.
enum SslStatus ssl_model_predict(const struct SslModel *model,
                                 const double *times,
                                 const int64_t *markers,
                                 size_t len,
                                 int64_t *markers_out,
                                 double *gaps_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSL_MTPP_H */
