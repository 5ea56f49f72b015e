#ifndef EVA_H
#define EVA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status returned by every fallible call.
 */
typedef enum EvaStatus {
  EVA_STATUS_OK = 0,
  EVA_STATUS_NULL_POINTER = 1,
  EVA_STATUS_INVALID_UTF8 = 2,
  EVA_STATUS_CONFIG = 3,
  EVA_STATUS_IO = 4,
  EVA_STATUS_PARSE = 5,
  EVA_STATUS_NUMERICAL = 6,
  EVA_STATUS_RUNTIME = 7,
  EVA_STATUS_PANIC = 8,
} EvaStatus;

/**
 * Opaque run configuration.
 */
typedef struct EvaConfig EvaConfig;

/**
 * Opaque trained model.
 */
typedef struct EvaModel EvaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *eva_last_error_message(void);

/**
 * Loads a TOML config, or the defaults when `path` is null.
 *
 * # Safety
 * `path` is null or a nul-terminated string; `out` is a valid pointer.
 */
enum EvaStatus eva_config_load(const char *path, struct EvaConfig **out);

/**
 * Applies one `key=value` override. On failure the config is unchanged.
 *
 * # Safety
 * `config` comes from [`eva_config_load`]; `assignment` is nul-terminated.
 */
enum EvaStatus eva_config_set(struct EvaConfig *config, const char *assignment);

/**
 * Writes the config digest (64 hex characters plus nul) into `buf`.
 *
 * # Safety
 * `buf` points to at least `len` writable bytes.
 */
enum EvaStatus eva_config_digest(const struct EvaConfig *config, char *buf, size_t len);

/**
 * # Safety
 * `config` is null or comes from [`eva_config_load`] and is not used again.
 */
void eva_config_free(struct EvaConfig *config);

/**
 * Simulates a toy cohort and writes it as JSONL.
 *
 * # Safety
 * `config` is a live handle; `out_path` is nul-terminated.
 */
enum EvaStatus eva_simulate(const struct EvaConfig *config, const char *out_path);

/**
 * Trains on a JSONL cohort and returns a model handle.
 *
 * # Safety
 * `config` is a live handle; `cohort_path` is nul-terminated; `out` is valid.
 */
enum EvaStatus eva_train(const struct EvaConfig *config,
                         const char *cohort_path,
                         struct EvaModel **out);

/**
 * # Safety
 * `path` is nul-terminated; `out` is valid.
 */
enum EvaStatus eva_model_load(const char *path, struct EvaModel **out);

/**
 * # Safety
 * `model` is a live handle; `path` is nul-terminated.
 */
enum EvaStatus eva_model_save(const struct EvaModel *model, const char *path);

/**
 * 1 for the conditional variant, 0 for the unconditional one, -1 on null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
int32_t eva_model_is_conditional(const struct EvaModel *model);

/**
 * Number of retained posterior samples, 0 on null.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t eva_model_reservoir_len(const struct EvaModel *model);

/**
 * Generates records with the config's generation settings and writes
 * them as JSONL.
 *
 * # Safety
 * Both handles are live; `out_path` is nul-terminated.
 */
enum EvaStatus eva_generate(const struct EvaModel *model,
                            const struct EvaConfig *config,
                            const char *out_path);

/**
 * # Safety
 * `model` is null or a live handle that is not used again.
 */
void eva_model_free(struct EvaModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVA_H */
