#ifndef ASAG_H
#define ASAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Status codes. Values 2-4 match the command-line exit codes.
typedef enum AsagStatus {
  ASAG_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  ASAG_STATUS_INVALID_ARGUMENT = 1,
  ASAG_STATUS_CONFIG = 2,
  ASAG_STATUS_DATA = 3,
  ASAG_STATUS_NUMERIC = 4,
  // A panic was caught at the boundary.
  ASAG_STATUS_INTERNAL = 5,
} AsagStatus;

// Opaque predictor bank.
typedef struct AsagBank AsagBank;

// Opaque result of one generator run.
typedef struct AsagResult AsagResult;

typedef struct AsagBox {
  float cx;
  float cy;
  float w;
  float h;
} AsagBox;

// One raw pyramid level, `channels x height x width` values, channel-major.
typedef struct AsagLevel {
  uint8_t level;
  uint32_t height;
  uint32_t width;
  const float *values;
} AsagLevel;

typedef struct AsagAnchor {
  struct AsagBox bbox;
  float score;
  // 6 or 5 for the fixed part, 4 or 3 for probed levels.
  uint8_t level;
  uint32_t patch;
} AsagAnchor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *asag_last_error(void);

// Library version as a static NUL-terminated string.
const char *asag_version(void);

// # Safety
// `a`, `b` and `out` must be valid pointers.
enum AsagStatus asag_iou(const struct AsagBox *a, const struct AsagBox *b, float *out);

// # Safety
// `a`, `b` and `out` must be valid pointers.
enum AsagStatus asag_giou(const struct AsagBox *a, const struct AsagBox *b, float *out);

// The normalization function `sigmoid(4.5 (x1 x2 - 1/3)) / sigmoid(3)`.
float asag_norm_weight(float x1, float x2);

// Positive and negative query weights with the default exponents.
//
// # Safety
// Output pointers must be valid.
enum AsagStatus asag_query_weights(float score, float iou, float *w_pos, float *w_neg);

// Minimum-cost assignment of a row-major `rows x cols` cost matrix.
// `row_to_col` receives `rows` entries, `-1` for unmatched rows.
//
// # Safety
// `cost` must hold `rows * cols` doubles and `row_to_col` `rows` slots.
enum AsagStatus asag_hungarian(const double *cost,
                               size_t rows,
                               size_t cols,
                               int64_t *row_to_col,
                               double *total);

// Load a weights file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AsagStatus asag_bank_load(const char *path, struct AsagBank **out);

// Fresh bank from a model config (JSON; null or empty for defaults).
// `zero` selects the all-zero parameter set instead of seeded initialization.
//
// # Safety
// `model_json` must be null or NUL-terminated; `out` must be valid.
enum AsagStatus asag_bank_new(const char *model_json,
                              uint64_t seed,
                              bool zero,
                              struct AsagBank **out);

// # Safety
// `bank` must come from this library; `path` must be NUL-terminated.
enum AsagStatus asag_bank_save(const struct AsagBank *bank, const char *path);

// Raw channel count the bank expects in its input pyramid.
//
// # Safety
// `bank` must be null or come from this library.
size_t asag_bank_raw_channels(const struct AsagBank *bank);

// # Safety
// `bank` must be null or come from this library and not be used afterwards.
void asag_bank_free(struct AsagBank *bank);

// Run the generator on a raw pyramid (levels 3, 4, 5 in any order; each
// with the bank's raw channel count). `gen_json` may be null for defaults.
//
// # Safety
// `levels` must point to `n_levels` entries whose `values` hold
// `channels * height * width` floats.
enum AsagStatus asag_generate(const struct AsagBank *bank,
                              const char *gen_json,
                              const struct AsagLevel *levels,
                              size_t n_levels,
                              struct AsagResult **out);

// Number of valid output anchors.
//
// # Safety
// `res` must be null or come from [`asag_generate`].
size_t asag_result_len(const struct AsagResult *res);

// Copy up to `cap` valid anchors (descending score) into `buf`.
//
// # Safety
// `buf` must have room for `cap` anchors; `written` may be null.
enum AsagStatus asag_result_anchors(const struct AsagResult *res,
                                    struct AsagAnchor *buf,
                                    size_t cap,
                                    size_t *written);

// Deepest pyramid level the run used (5 when probing stopped early).
//
// # Safety
// `res` must be null or come from [`asag_generate`].
uint8_t asag_result_deepest_level(const struct AsagResult *res);

// Total FLOPs of the run (predictor, compression and resampling).
//
// # Safety
// `res` must be null or come from [`asag_generate`].
uint64_t asag_result_flops(const struct AsagResult *res);

// # Safety
// `res` must be null or come from [`asag_generate`] and not be used afterwards.
void asag_result_free(struct AsagResult *res);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASAG_H */
