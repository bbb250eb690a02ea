#ifndef MANGO_CURATE_H
#define MANGO_CURATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum MangoStatus {
  MANGO_STATUS_OK = 0,
  MANGO_STATUS_NULL_ARGUMENT = 1,
  MANGO_STATUS_INVALID_UTF8 = 2,
  MANGO_STATUS_INVALID_ARGUMENT = 3,
  MANGO_STATUS_IO = 4,
  MANGO_STATUS_FORMAT = 5,
  MANGO_STATUS_NUMERICAL = 6,
  MANGO_STATUS_NO_TARGET = 7,
  MANGO_STATUS_CONFIG = 8,
  MANGO_STATUS_BUFFER_TOO_SMALL = 9,
  MANGO_STATUS_PANIC = 10,
} MangoStatus;

/**
 * Opaque response map handle.
 */
typedef struct MangoDetectionMap MangoDetectionMap;

/**
 * Opaque annual mask handle.
 */
typedef struct MangoMask MangoMask;

/**
 * Opaque scene handle.
 */
typedef struct MangoScene MangoScene;

/**
 * Class statistics of a response map.
 */
typedef struct MangoClassStats {
  double mu_m;
  double mu_b;
  double var_m;
  double var_b;
  size_t n_m;
  size_t n_b;
} MangoClassStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *mango_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mango_version(void);

/**
 * Builds a scene from band-sequential reflectances (`bands` planes of
 * `height`×`width`, row-major). `valid` holds one byte per pixel, nonzero
 * meaning observed; null means every pixel is valid. `date` is
 * `YYYY-MM-DD`.
 *
 * # Safety
 * Pointers must be valid for the lengths implied by the dimensions.
 */
enum MangoStatus mango_scene_new(const char *region_id,
                                 const char *date,
                                 size_t width,
                                 size_t height,
                                 size_t bands,
                                 const double *pixels,
                                 const uint8_t *valid,
                                 struct MangoScene **out);

/**
 * Reads an MSR1 image and optional validity file (`validity_path` may be
 * null).
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum MangoStatus mango_scene_read(const char *image_path,
                                  const char *validity_path,
                                  const char *region_id,
                                  const char *date,
                                  struct MangoScene **out);

/**
 * # Safety
 * `scene` must come from this library or be null.
 */
void mango_scene_free(struct MangoScene *scene);

/**
 * # Safety
 * Out pointers may be null; non-null ones must be writable.
 */
enum MangoStatus mango_scene_dims(const struct MangoScene *scene,
                                  size_t *width,
                                  size_t *height,
                                  size_t *bands);

/**
 * Builds a mask from one byte per pixel, nonzero meaning mangrove.
 *
 * # Safety
 * `data` must hold `width * height` bytes.
 */
enum MangoStatus mango_mask_new(const char *region_id,
                                size_t width,
                                size_t height,
                                const uint8_t *data,
                                struct MangoMask **out);

/**
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum MangoStatus mango_mask_read(const char *path, const char *region_id, struct MangoMask **out);

/**
 * # Safety
 * `mask` must come from this library or be null.
 */
void mango_mask_free(struct MangoMask *mask);

/**
 * Share of mask pixels labelled mangrove.
 *
 * # Safety
 * `out` must be writable.
 */
enum MangoStatus mango_mask_fraction(const struct MangoMask *mask, double *out);

/**
 * Matched-filter response of `scene` with the target spectrum taken from
 * `k` reference pixels of the eroded mask. `seed_namespace` keys the
 * reference sampling; `epsilon` is the relative covariance ridge.
 *
 * # Safety
 * Handles must be valid; `out` must be writable.
 */
enum MangoStatus mango_detect_matched_filter(const struct MangoScene *scene,
                                             const struct MangoMask *mask,
                                             size_t k,
                                             size_t element,
                                             double epsilon,
                                             uint64_t seed_namespace,
                                             struct MangoDetectionMap **out);

/**
 * MVI response with the given band positions.
 *
 * # Safety
 * `scene` must be valid; `out` must be writable.
 */
enum MangoStatus mango_detect_mvi(const struct MangoScene *scene,
                                  size_t green,
                                  size_t nir,
                                  size_t swir1,
                                  struct MangoDetectionMap **out);

/**
 * # Safety
 * `map` must come from this library or be null.
 */
void mango_map_free(struct MangoDetectionMap *map);

/**
 * Copies the map row-major into `buf` (NaN marks undefined pixels).
 * Returns `BufferTooSmall` when `len` is below width × height.
 *
 * # Safety
 * `buf` must be writable for `len` values.
 */
enum MangoStatus mango_map_copy(const struct MangoDetectionMap *map, double *buf, size_t len);

/**
 * Class statistics and Fisher ratio of a map against a mask. `j` receives
 * `+inf` when both classes are constant but distinct.
 *
 * # Safety
 * Handles must be valid; out pointers may be null.
 */
enum MangoStatus mango_map_score(const struct MangoDetectionMap *map,
                                 const struct MangoMask *mask,
                                 struct MangoClassStats *stats,
                                 double *j);

/**
 * Runs the whole pipeline. `masks_dir` and `config_json` may be null;
 * `workers` of 0 uses the default.
 *
 * # Safety
 * String arguments must be NUL-terminated.
 */
enum MangoStatus mango_run_pipeline(const char *manifest,
                                    const char *masks_dir,
                                    const char *out_dir,
                                    const char *config_json,
                                    size_t workers);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MANGO_CURATE_H */
