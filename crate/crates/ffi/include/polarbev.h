#ifndef POLARBEV_H
#define POLARBEV_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PbStatus {
  PB_STATUS_OK = 0,
  PB_STATUS_NULL_POINTER = 1,
  PB_STATUS_INVALID_ARGUMENT = 2,
  PB_STATUS_IO = 3,
  PB_STATUS_FORMAT = 4,
  PB_STATUS_CONFIG = 5,
  PB_STATUS_PANIC = 6,
} PbStatus;

/**
 * Detections owned by the library.
 */
typedef struct PbDetections PbDetections;

/**
 * Grid, weights, decoding and latency settings.
 */
typedef struct PbModel PbModel;

/**
 * A point cloud with its labeled boxes.
 */
typedef struct PbScene PbScene;

/**
 * Summary of one streamed sweep.
 */
typedef struct PbStreamSummary {
  uint32_t n_sectors;
  size_t n_detections;
  /**
   * Seconds.
   */
  double mean_latency;
  /**
   * Seconds.
   */
  double max_latency;
  /**
   * Fine grid cells held for one sector.
   */
  size_t peak_cells;
} PbStreamSummary;

/**
 * One detection: `bbox` is `[cx, cy, cz, w, l, h, theta]`.
 */
typedef struct PbDetection {
  double bbox[7];
  /**
   * Rectified score.
   */
  double score;
  double iou_pred;
  uint32_t cls;
} PbDetection;

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call into the library on the same thread.
 */
const char *pb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pb_version(void);

/**
 * BEV IoU of two rotated boxes given as `[cx, cy, w, h, theta]`.
 *
 * # Safety
 * `a` and `b` point to 5 doubles; `out` is writable.
 */
enum PbStatus pb_rotated_iou_bev(const double (*a)[5], const double (*b)[5], double *out);

/**
 * `score * iou_pred^alpha`.
 *
 * # Safety
 * `out` is writable.
 */
enum PbStatus pb_rectify_score(double score, double iou_pred, double alpha, double *out);

/**
 * Synthetic scene from the default generator settings.
 *
 * # Safety
 * `out` is writable; the handle is released with [`pb_scene_free`].
 */
enum PbStatus pb_scene_generate(uint64_t seed, struct PbScene **out);

/**
 * Scene from a JSON file written by the `synth` command.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PbStatus pb_scene_load(const char *path, struct PbScene **out);

/**
 * # Safety
 * `scene` is a live handle; `out` is writable.
 */
enum PbStatus pb_scene_point_count(const struct PbScene *scene, size_t *out);

/**
 * # Safety
 * `scene` is null or a handle not yet freed.
 */
void pb_scene_free(struct PbScene *scene);

/**
 * Model from a checkpoint directory written by `train`.
 *
 * # Safety
 * `dir` is a NUL-terminated string; `out` is writable.
 */
enum PbStatus pb_model_load(const char *dir, struct PbModel **out);

/**
 * Untrained reference model with weights drawn from `seed`.
 *
 * # Safety
 * `out` is writable; the handle is released with [`pb_model_free`].
 */
enum PbStatus pb_model_init(uint64_t seed, struct PbModel **out);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void pb_model_free(struct PbModel *model);

/**
 * Detections on `scene`, processed as `n_sectors` azimuth sectors
 * (1 is the full sweep) and concatenated in sector order.
 *
 * # Safety
 * `model` and `scene` are live handles; `out` is writable.
 */
enum PbStatus pb_model_infer(const struct PbModel *model,
                             const struct PbScene *scene,
                             uint32_t n_sectors,
                             struct PbDetections **out);

/**
 * Streams `scene` through `n_sectors` sectors under the model's latency
 * settings.
 *
 * # Safety
 * `model` and `scene` are live handles; `out` is writable.
 */
enum PbStatus pb_stream_report(const struct PbModel *model,
                               const struct PbScene *scene,
                               uint32_t n_sectors,
                               struct PbStreamSummary *out);

/**
 * # Safety
 * `dets` is a live handle; `out` is writable.
 */
enum PbStatus pb_detections_len(const struct PbDetections *dets, size_t *out);

/**
 * # Safety
 * `dets` is a live handle; `out` is writable.
 */
enum PbStatus pb_detections_get(const struct PbDetections *dets,
                                size_t index,
                                struct PbDetection *out);

/**
 * Detections as JSON lines, in the `infer` command's format. Release the
 * string with [`pb_string_free`].
 *
 * # Safety
 * `dets` is a live handle; `out` is writable.
 */
enum PbStatus pb_detections_to_jsonl(const struct PbDetections *dets, char **out);

/**
 * # Safety
 * `dets` is null or a handle not yet freed.
 */
void pb_detections_free(struct PbDetections *dets);

/**
 * # Safety
 * `s` is null or a string returned by this library and not yet freed.
 */
void pb_string_free(char *s);

#endif  /* POLARBEV_H */
