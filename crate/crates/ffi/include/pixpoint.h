#ifndef PIXPOINT_H
#define PIXPOINT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Codes 2 to 5 match the command-line exit codes.
typedef enum {
  PX_STATUS_OK = 0,
  PX_STATUS_FAILED = 1,
  PX_STATUS_CONFIG = 2,
  PX_STATUS_MISSING_CHECKPOINT = 3,
  PX_STATUS_DATASET = 4,
  PX_STATUS_NUMERICAL = 5,
  PX_STATUS_INVALID_ARGUMENT = 10,
  PX_STATUS_BACKGROUND_PIXEL = 11,
  PX_STATUS_BUFFER_TOO_SMALL = 12,
  PX_STATUS_IO = 13,
  PX_STATUS_PANIC = 14,
} PxStatus;

// Opaque run configuration.
typedef struct PxConfig PxConfig;

// Opaque dataset.
typedef struct PxDataset PxDataset;

// Opaque model with the stage settings it is evaluated under.
typedef struct PxModel PxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread; empty after a success. The
// pointer stays valid until the next call on this thread.
const char *px_last_error(void);

// Library version as a static string.
const char *px_version(void);

// Runs the command-line front end with `argc` arguments (program name
// first) and returns its exit code.
//
// # Safety
// `argv` must point to `argc` valid NUL-terminated strings.
int px_run_cli(int argc, const char *const *argv);

// Parses TOML (or takes the defaults when `toml` is null).
//
// # Safety
// `toml` must be null or NUL-terminated; `out` must be a valid pointer.
PxStatus px_config_new(const char *toml, PxConfig **out);

// Applies one `key=value` override.
//
// # Safety
// `cfg` must come from [`px_config_new`]; `assignment` must be NUL-terminated.
PxStatus px_config_set(PxConfig *cfg, const char *assignment);

// Writes the 64-character hex hash plus a NUL into `buf` (at least 65 bytes).
//
// # Safety
// `buf` must be writable for `len` bytes.
PxStatus px_config_hash(const PxConfig *cfg, char *buf, uintptr_t len);

// Number of k values in the configured evaluation k list.
//
// # Safety
// `cfg` must be a live config handle or null.
uintptr_t px_config_k_count(const PxConfig *cfg);

// # Safety
// `cfg` must come from [`px_config_new`] and not be used afterwards.
void px_config_free(PxConfig *cfg);

// Generates the dataset described by `cfg` in memory.
//
// # Safety
// Handles must be live; `out` must be a valid pointer.
PxStatus px_dataset_generate(const PxConfig *cfg, PxDataset **out);

// # Safety
// `dir` must be NUL-terminated; `out` must be a valid pointer.
PxStatus px_dataset_load(const char *dir, PxDataset **out);

// # Safety
// `ds` must be live; `dir` must be NUL-terminated.
PxStatus px_dataset_write(const PxDataset *ds, const char *dir);

// Number of objects, or 0 for a null handle.
//
// # Safety
// `ds` must be a live dataset handle or null.
uintptr_t px_dataset_len(const PxDataset *ds);

// Category id and split (0 train, 1 test) of one object.
//
// # Safety
// `ds` must be live; `category` and `split` must be valid pointers.
PxStatus px_dataset_object_info(const PxDataset *ds,
                                uintptr_t object,
                                uint32_t *category,
                                uint32_t *split);

// # Safety
// `ds` must come from a dataset constructor and not be used afterwards.
void px_dataset_free(PxDataset *ds);

// A freshly initialized model (evaluated under stage 1 settings).
//
// # Safety
// Handles must be live; `out` must be a valid pointer.
PxStatus px_model_new(const PxConfig *cfg, const PxDataset *ds, PxModel **out);

// Loads a training checkpoint; the model is evaluated under the settings
// of the stage that wrote it.
//
// # Safety
// Handles must be live; `path` must be NUL-terminated; `out` must be valid.
PxStatus px_model_load(const PxConfig *cfg, const PxDataset *ds, const char *path, PxModel **out);

// Render resolution the model is evaluated at.
//
// # Safety
// `model` must be a live model handle or null.
uint32_t px_model_resolution(const PxModel *model);

// # Safety
// `model` must come from a model constructor and not be used afterwards.
void px_model_free(PxModel *model);

// Held-out LocAcc@k for one protocol. Each output buffer needs
// [`px_config_k_count`] entries.
//
// # Safety
// Handles must be live; buffers must be writable for `len` doubles.
PxStatus px_eval_local(const PxModel *model,
                       const PxDataset *ds,
                       const PxConfig *cfg,
                       const char *protocol_name,
                       double *model_scores,
                       double *baseline_scores,
                       double *oracle_scores,
                       uintptr_t len);

// Held-out image-to-shape retrieval. `recall` needs [`px_config_k_count`]
// entries; `mrr` and `chance_r1` receive single values.
//
// # Safety
// Handles must be live; pointers must be valid.
PxStatus px_eval_retrieval(const PxModel *model,
                           const PxDataset *ds,
                           const PxConfig *cfg,
                           const char *protocol_name,
                           double *recall,
                           uintptr_t len,
                           double *mrr,
                           double *chance_r1);

// Top tokens for a pixel of one view. Writes up to `cap` results and the
// count into `written`.
//
// # Safety
// Handles must be live; `tokens` and `similarities` must be writable for
// `cap` entries.
PxStatus px_query_2d_to_3d(const PxModel *model,
                           const PxDataset *ds,
                           const PxConfig *cfg,
                           uintptr_t object,
                           uintptr_t view,
                           uintptr_t row,
                           uintptr_t col,
                           uint32_t *tokens,
                           double *similarities,
                           uintptr_t cap,
                           uintptr_t *written);

// Transfers the clicked part to the mesh. On success `n_faces` holds the
// region size (0 when the pipeline found no region) and `iou` the face IoU
// against the clicked part. When `cap` is too small the call returns
// `BufferTooSmall` with the required size in `n_faces`.
//
// # Safety
// Handles must be live; `faces` must be writable for `cap` entries.
PxStatus px_part_transfer(const PxModel *model,
                          const PxDataset *ds,
                          const PxConfig *cfg,
                          uintptr_t object,
                          uintptr_t view,
                          uintptr_t row,
                          uintptr_t col,
                          uint32_t *faces,
                          uintptr_t cap,
                          uintptr_t *n_faces,
                          double *iou);

// Runs every self-check; `failed` receives the number of failing checks.
//
// # Safety
// `failed` must be a valid pointer.
PxStatus px_selftest(uintptr_t *failed);

// Null-safe helper for bindings that want to reset the error slot.
void px_clear_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIXPOINT_H */
