#ifndef OABTG_H
#define OABTG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The non-zero values below 5 match the command line exit
 * codes.
 */
typedef enum {
  OABTG_STATUS_OK = 0,
  /**
   * Bad configuration or argument value.
   */
  OABTG_STATUS_USAGE = 2,
  /**
   * Malformed or inconsistent input data.
   */
  OABTG_STATUS_DATA = 3,
  /**
   * Numeric failure or violated internal contract.
   */
  OABTG_STATUS_NUMERIC = 4,
  OABTG_STATUS_NULL_POINTER = 5,
  OABTG_STATUS_INVALID_UTF8 = 6,
  OABTG_STATUS_PANIC = 7,
} OabtgStatus;

/**
 * Fusion of the two directional word distributions.
 */
typedef enum {
  /**
   * Whatever the checkpoint was trained with.
   */
  OABTG_FUSION_DEFAULT = 0,
  OABTG_FUSION_MEAN = 1,
  OABTG_FUSION_GEOMETRIC = 2,
} OabtgFusion;

/**
 * An opened feature manifest.
 */
typedef struct OabtgDataset OabtgDataset;

/**
 * A loaded checkpoint.
 */
typedef struct OabtgModel OabtgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * call into this library on the same thread.
 */
const char *oabtg_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *oabtg_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void oabtg_string_free(char *s);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
OabtgStatus oabtg_model_load(const char *path, OabtgModel **out);

/**
 * # Safety
 * `model` must come from [`oabtg_model_load`] and not have been freed.
 */
void oabtg_model_free(OabtgModel *model);

/**
 * Vocabulary size of the model, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t oabtg_model_vocab_size(const OabtgModel *model);

/**
 * Opens and validates a feature manifest.
 *
 * # Safety
 * `manifest_path` must be a nul-terminated string and `out` a valid pointer.
 */
OabtgStatus oabtg_dataset_open(const char *manifest_path, OabtgDataset **out);

/**
 * # Safety
 * `dataset` must come from [`oabtg_dataset_open`] and not have been freed.
 */
void oabtg_dataset_free(OabtgDataset *dataset);

/**
 * Number of videos, or 0 for null.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t oabtg_dataset_len(const OabtgDataset *dataset);

/**
 * Id of the video at `index`.
 *
 * # Safety
 * `dataset` must be a live handle and `out` a valid pointer.
 */
OabtgStatus oabtg_dataset_video_id(const OabtgDataset *dataset, size_t index, char **out);

/**
 * Captions one video. Writes `{"video_id","caption","score","tokens"}` as
 * JSON. A zero `beam` uses the checkpoint's width.
 *
 * # Safety
 * Handles must be live, `video_id` nul-terminated and `out_json` valid.
 */
OabtgStatus oabtg_caption(const OabtgModel *model,
                          const OabtgDataset *dataset,
                          const char *video_id,
                          size_t beam,
                          OabtgFusion fusion,
                          char **out_json);

/**
 * Forward and backward trajectories of one video as JSON, 1-based indices.
 *
 * # Safety
 * `dataset` must be live, `video_id` nul-terminated and `out_json` valid.
 */
OabtgStatus oabtg_trace_graph(const OabtgDataset *dataset, const char *video_id, char **out_json);

/**
 * Corpus BLEU@4. `candidates_json` maps video id to a caption string;
 * `references_json` maps video id to a list of reference strings.
 *
 * # Safety
 * Strings must be nul-terminated and `out` valid.
 */
OabtgStatus oabtg_bleu4(const char *candidates_json, const char *references_json, double *out);

/**
 * Intersection over union of two `[x_min, y_min, x_max, y_max]` boxes.
 *
 * # Safety
 * `a` and `b` must each point to four doubles; `out` must be valid.
 */
OabtgStatus oabtg_iou_similarity(const double *a, const double *b, double *out);

/**
 * Area similarity `exp(-|min/max - 1|)` of two boxes.
 *
 * # Safety
 * As for [`oabtg_iou_similarity`].
 */
OabtgStatus oabtg_area_similarity(const double *a, const double *b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OABTG_H */
