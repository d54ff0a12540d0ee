#ifndef TSDFPP_H
#define TSDFPP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Label value for pixels that belong to no segment.
#define TSDFPP_NO_LABEL UINT32_MAX

typedef enum TsdfppStatus {
  TSDFPP_STATUS_OK = 0,
  TSDFPP_STATUS_NULL_POINTER = 1,
  TSDFPP_STATUS_INVALID_ARGUMENT = 2,
  TSDFPP_STATUS_UNKNOWN_OBJECT = 3,
  TSDFPP_STATUS_IO = 4,
  TSDFPP_STATUS_BAD_FILE = 5,
  TSDFPP_STATUS_PANIC = 6,
} TsdfppStatus;

typedef enum TsdfppMode {
  // Layered multi-object map.
  TSDFPP_MODE_LAYERED = 0,
  // One surface per voxel.
  TSDFPP_MODE_STANDARD = 1,
} TsdfppMode;

// Opaque map handle.
typedef struct TsdfppMap TsdfppMap;

// Opaque triangle mesh handle.
typedef struct TsdfppMesh TsdfppMesh;

typedef struct TsdfppCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} TsdfppCamera;

typedef struct TsdfppIntegrationStats {
  uint64_t samples;
  uint64_t reinforced;
  uint64_t weakened;
  uint64_t swapped;
} TsdfppIntegrationStats;

typedef struct TsdfppRunSummary {
  uint32_t frames;
  uint32_t objects;
  uint64_t peak_allocated_blocks;
  // Revealed-region completeness, or -1 when the scene has no evaluation.
  double completeness;
  uint32_t holes;
  uint64_t audit_checked;
  uint64_t audit_changed;
} TsdfppRunSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length without the NUL, or 0
// when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t tsdfpp_last_error(char *buf, size_t len);

// Creates an empty map holding only the background model.
//
// # Safety
// `out` must point to writable storage for a handle.
enum TsdfppStatus tsdfpp_map_new(double voxel_size,
                                 uint32_t voxels_per_block_side,
                                 double truncation_distance,
                                 enum TsdfppMode mode,
                                 struct TsdfppMap **out);

// # Safety
// `map` must be null or a handle from this library that is not used afterwards.
void tsdfpp_map_free(struct TsdfppMap *map);

// Registers a new object model and returns its id.
//
// # Safety
// `map` must be a valid handle and `out_id` writable.
enum TsdfppStatus tsdfpp_map_add_object(struct TsdfppMap *map, bool semantic, uint32_t *out_id);

// Number of object models, the background included.
//
// # Safety
// `map` must be a valid handle and `out_count` writable.
enum TsdfppStatus tsdfpp_map_object_count(const struct TsdfppMap *map, uint32_t *out_count);

// Fuses one depth frame. `depth` holds ranges along each pixel ray in meters
// (0 or non-finite for no measurement) and `labels` the object id of each
// pixel; both are row-major `width × height` arrays. `stats` may be null.
//
// # Safety
// All pointers except `stats` must be valid; the images must hold
// `width × height` elements.
enum TsdfppStatus tsdfpp_map_integrate(struct TsdfppMap *map,
                                       const struct TsdfppCamera *camera,
                                       const double *camera_pose,
                                       const float *depth,
                                       const uint32_t *labels,
                                       struct TsdfppIntegrationStats *stats);

// Moves object `id` by the world-frame rigid `motion`.
//
// # Safety
// `map` must be a valid handle and `motion` point to 16 doubles.
enum TsdfppStatus tsdfpp_map_update_pose(struct TsdfppMap *map, uint32_t id, const double *motion);

// Renders the map from `camera_pose`. Each output array holds
// `width × height` elements; misses get range 0 and [`TSDFPP_NO_LABEL`].
//
// # Safety
// All pointers must be valid and the outputs sized for the camera.
enum TsdfppStatus tsdfpp_map_raycast(const struct TsdfppMap *map,
                                     const struct TsdfppCamera *camera,
                                     const double *camera_pose,
                                     float *out_depth,
                                     uint32_t *out_labels);

// Extracts the surface of object `id`.
//
// # Safety
// `map` must be a valid handle and `out` writable.
enum TsdfppStatus tsdfpp_map_extract_mesh(const struct TsdfppMap *map,
                                          uint32_t id,
                                          struct TsdfppMesh **out);

// # Safety
// `mesh` must be null or a handle from this library that is not used afterwards.
void tsdfpp_mesh_free(struct TsdfppMesh *mesh);

// # Safety
// `mesh` must be a valid handle; the outputs writable.
enum TsdfppStatus tsdfpp_mesh_size(const struct TsdfppMesh *mesh,
                                   size_t *out_vertices,
                                   size_t *out_triangles);

// Copies vertex positions (3 doubles each) and triangle vertex indices (3 each).
// Either output may be null to skip it.
//
// # Safety
// Non-null outputs must be sized as reported by [`tsdfpp_mesh_size`].
enum TsdfppStatus tsdfpp_mesh_copy(const struct TsdfppMesh *mesh,
                                   double *out_vertices,
                                   uint32_t *out_triangles);

// # Safety
// `map` must be a valid handle and `path` a NUL-terminated string.
enum TsdfppStatus tsdfpp_map_save(const struct TsdfppMap *map, const char *path);

// Loads a map written by [`tsdfpp_map_save`] or the command line tool.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum TsdfppStatus tsdfpp_map_load(const char *path, struct TsdfppMap **out);

// Runs the full pipeline on a scene script. `out_dir` may be null to skip
// writing meshes and reports; `summary` may be null.
//
// # Safety
// `scene_path` must be a NUL-terminated string; `out_dir` null or one.
enum TsdfppStatus tsdfpp_run_scene(const char *scene_path,
                                   enum TsdfppMode mode,
                                   const char *out_dir,
                                   struct TsdfppRunSummary *summary);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSDFPP_H */
