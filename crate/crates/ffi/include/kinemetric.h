#ifndef KINEMETRIC_H
#define KINEMETRIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every exported function.
 */
typedef enum KmStatus {
  KM_STATUS_OK = 0,
  KM_STATUS_NULL_POINTER = 1,
  KM_STATUS_INVALID_ARGUMENT = 2,
  KM_STATUS_DEGENERATE_REPRESENTATION = 3,
  KM_STATUS_SHAPE_MISMATCH = 4,
  KM_STATUS_MISSING_DATA = 5,
  KM_STATUS_UNSOLVABLE_FRAME = 6,
  KM_STATUS_PARSE = 7,
  KM_STATUS_IO = 8,
  KM_STATUS_INTERNAL = 9,
  KM_STATUS_PANIC = 10,
} KmStatus;

/*
 Opaque skeleton handle.
 */
typedef struct KmSkeleton KmSkeleton;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer is
 valid until the next call into this library on the same thread.
 */
const char *km_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *km_version(void);

/*
 Intrinsic XYZ Euler angles (degrees) to a rotation matrix.

 # Safety
 `euler` points to 3 doubles and `out` to 9.
 */
enum KmStatus km_euler_to_matrix(const double *euler, double *out);

/*
 Rotation matrix to canonical intrinsic XYZ Euler angles (degrees).

 # Safety
 `matrix` points to 9 doubles and `out` to 3.
 */
enum KmStatus km_matrix_to_euler(const double *matrix, double *out);

/*
 Quaternion (normalized internally) to a rotation matrix.

 # Safety
 `quat` points to 4 doubles and `out` to 9.
 */
enum KmStatus km_quat_to_matrix(const double *quat, double *out);

/*
 Rotation matrix to a unit quaternion with `w >= 0`.

 # Safety
 `matrix` points to 9 doubles and `out` to 4.
 */
enum KmStatus km_matrix_to_quat(const double *matrix, double *out);

/*
 6D vector to a rotation matrix by Gram–Schmidt.

 # Safety
 `sixd` points to 6 doubles and `out` to 9.
 */
enum KmStatus km_sixd_to_matrix(const double *sixd, double *out);

/*
 Rotation matrix to its 6D vector.

 # Safety
 `matrix` points to 9 doubles and `out` to 6.
 */
enum KmStatus km_matrix_to_sixd(const double *matrix, double *out);

/*
 Geodesic angle between two rotation matrices, in degrees.

 # Safety
 `a` and `b` point to 9 doubles each; `out` to one.
 */
enum KmStatus km_geodesic_deg(const double *a, const double *b, double *out);

/*
 Mean per-joint angle error between two `[frames][joints][3]` arrays of
 Euler angles (degrees), with differences wrapped into (-180, 180].

 # Safety
 `pred` and `truth` point to `frames * joints * 3` doubles; `out` to one.
 */
enum KmStatus km_mpjae(const double *pred,
                       const double *truth,
                       size_t frames,
                       size_t joints,
                       double *out);

/*
 Softmax-weighted fusion of `views` per-view volumes, each
 `side³ × channels` doubles (channel fastest), into `out` (same size as
 one view).

 # Safety
 `volumes` points to `views * side³ * channels` doubles and `out` to
 `side³ * channels`.
 */
enum KmStatus km_aggregate(const double *volumes,
                           size_t views,
                           size_t side,
                           size_t channels,
                           double *out);

/*
 Creates the bundled 14-joint humanoid skeleton.

 # Safety
 `out` must be a valid pointer; the handle is released with
 [`km_skeleton_free`].
 */
enum KmStatus km_skeleton_humanoid(struct KmSkeleton **out);

/*
 Parses a skeleton from a NUL-terminated JSON string.

 # Safety
 `json` is a valid C string and `out` a valid pointer.
 */
enum KmStatus km_skeleton_from_json(const char *json, struct KmSkeleton **out);

/*
 Releases a skeleton handle. NULL is ignored.

 # Safety
 `skeleton` comes from this library and is not used afterwards.
 */
void km_skeleton_free(struct KmSkeleton *skeleton);

/*
 Number of articulated joints and of markers.

 # Safety
 `skeleton` is a live handle; `joints` and `markers` are valid pointers.
 */
enum KmStatus km_skeleton_counts(const struct KmSkeleton *skeleton,
                                 size_t *joints,
                                 size_t *markers);

/*
 World marker positions (`markers × 3`, skeleton order) for a pose given
 as a root translation (mm) and `joints × 3` Euler angles (degrees).

 # Safety
 Array sizes as described; `skeleton` is a live handle.
 */
enum KmStatus km_forward_kinematics(const struct KmSkeleton *skeleton,
                                    const double *root,
                                    const double *angles,
                                    double *out_markers);

/*
 Fits one frame of markers (`markers × 3`, skeleton order; NaN rows are
 missing). `weights` may be NULL for uniform weights; `init_root` and
 `init_angles` may both be NULL to start from the rest pose. Writes the
 solved pose, the weighted residual (mm²) and whether the solver converged.

 # Safety
 Array sizes as described; `skeleton` is a live handle.
 */
enum KmStatus km_ik_solve_frame(const struct KmSkeleton *skeleton,
                                const double *markers,
                                const double *weights,
                                const double *init_root,
                                const double *init_angles,
                                double *out_root,
                                double *out_angles,
                                double *out_residual,
                                int32_t *out_converged);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KINEMETRIC_H */
