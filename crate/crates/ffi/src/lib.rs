//! C ABI for kinemetric.
//!
//! Every function returns a [`KmStatus`]. On failure the message is available
//! from [`km_last_error_message`] on the same thread until the next call.
//! Matrices are 3×3 row-major, Euler triples are degrees, quaternions are
//! `(w, x, y, z)` and 6D vectors are the first two matrix columns.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use kinemetric::geomcam::{aggregate, ViewVolume};
use kinemetric::iksolve::{solve_frame, IkOptions, IkWeights};
use kinemetric::kinmodel::{KinematicModel, MarkerFrame, Pose};
use kinemetric::nalgebra::{Matrix3, Vector3};
use kinemetric::rotmath::{
    euler_to_matrix, geodesic_deg, matrix_to_euler, matrix_to_quat, matrix_to_sixd, mpjae, quat_to_matrix,
    sixd_to_matrix, AngleSet, EulerConvention, EulerTriple, RotationMatrix, SixDRep, UnitQuaternion,
};
use kinemetric::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DegenerateRepresentation = 3,
    ShapeMismatch = 4,
    MissingData = 5,
    UnsolvableFrame = 6,
    Parse = 7,
    Io = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque skeleton handle.
pub struct KmSkeleton {
    model: KinematicModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> KmStatus {
    match e {
        Error::InvalidArgument(_) | Error::DegenerateVirtualDistance { .. } => KmStatus::InvalidArgument,
        Error::DegenerateRepresentation(_) | Error::DegenerateView(_) => KmStatus::DegenerateRepresentation,
        Error::ShapeMismatch(_) => KmStatus::ShapeMismatch,
        Error::MissingData(_) => KmStatus::MissingData,
        Error::UnsolvableFrame(_) => KmStatus::UnsolvableFrame,
        Error::Parse { .. } | Error::Json { .. } => KmStatus::Parse,
        Error::Io { .. } => KmStatus::Io,
        _ => KmStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KmStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KmStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            KmStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            KmStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn model_of<'a>(s: *const KmSkeleton) -> Result<&'a KinematicModel, Fail> {
    s.as_ref().map(|s| &s.model).ok_or(Fail::Null("skeleton"))
}

fn read_matrix(m: &[f64]) -> Result<RotationMatrix, Error> {
    RotationMatrix::new(Matrix3::from_row_slice(m))
}

fn write_matrix(m: &RotationMatrix, out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m.matrix()[(r, c)];
        }
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn km_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn km_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Intrinsic XYZ Euler angles (degrees) to a rotation matrix.
///
/// # Safety
/// `euler` points to 3 doubles and `out` to 9.
#[no_mangle]
pub unsafe extern "C" fn km_euler_to_matrix(euler: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let e = input(euler, 3, "euler")?;
        let out = output(out, 9, "out")?;
        let m = euler_to_matrix(&EulerTriple::new(e[0], e[1], e[2]), EulerConvention::XYZ)?;
        write_matrix(&m, out);
        Ok(())
    })
}

/// Rotation matrix to canonical intrinsic XYZ Euler angles (degrees).
///
/// # Safety
/// `matrix` points to 9 doubles and `out` to 3.
#[no_mangle]
pub unsafe extern "C" fn km_matrix_to_euler(matrix: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let m = read_matrix(input(matrix, 9, "matrix")?)?;
        output(out, 3, "out")?.copy_from_slice(&matrix_to_euler(&m, EulerConvention::XYZ).as_array());
        Ok(())
    })
}

/// Quaternion (normalized internally) to a rotation matrix.
///
/// # Safety
/// `quat` points to 4 doubles and `out` to 9.
#[no_mangle]
pub unsafe extern "C" fn km_quat_to_matrix(quat: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let q = input(quat, 4, "quat")?;
        let out = output(out, 9, "out")?;
        write_matrix(&quat_to_matrix(&UnitQuaternion::from_raw([q[0], q[1], q[2], q[3]])?), out);
        Ok(())
    })
}

/// Rotation matrix to a unit quaternion with `w >= 0`.
///
/// # Safety
/// `matrix` points to 9 doubles and `out` to 4.
#[no_mangle]
pub unsafe extern "C" fn km_matrix_to_quat(matrix: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let m = read_matrix(input(matrix, 9, "matrix")?)?;
        output(out, 4, "out")?.copy_from_slice(&matrix_to_quat(&m).as_array());
        Ok(())
    })
}

/// 6D vector to a rotation matrix by Gram–Schmidt.
///
/// # Safety
/// `sixd` points to 6 doubles and `out` to 9.
#[no_mangle]
pub unsafe extern "C" fn km_sixd_to_matrix(sixd: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let v = input(sixd, 6, "sixd")?;
        let out = output(out, 9, "out")?;
        let m = sixd_to_matrix(&SixDRep::from_array(std::array::from_fn(|k| v[k])))?;
        write_matrix(&m, out);
        Ok(())
    })
}

/// Rotation matrix to its 6D vector.
///
/// # Safety
/// `matrix` points to 9 doubles and `out` to 6.
#[no_mangle]
pub unsafe extern "C" fn km_matrix_to_sixd(matrix: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let m = read_matrix(input(matrix, 9, "matrix")?)?;
        output(out, 6, "out")?.copy_from_slice(&matrix_to_sixd(&m).as_array());
        Ok(())
    })
}

/// Geodesic angle between two rotation matrices, in degrees.
///
/// # Safety
/// `a` and `b` point to 9 doubles each; `out` to one.
#[no_mangle]
pub unsafe extern "C" fn km_geodesic_deg(a: *const f64, b: *const f64, out: *mut f64) -> KmStatus {
    guard(|| {
        let a = read_matrix(input(a, 9, "a")?)?;
        let b = read_matrix(input(b, 9, "b")?)?;
        output(out, 1, "out")?[0] = geodesic_deg(&a, &b);
        Ok(())
    })
}

/// Mean per-joint angle error between two `[frames][joints][3]` arrays of
/// Euler angles (degrees), with differences wrapped into (-180, 180].
///
/// # Safety
/// `pred` and `truth` point to `frames * joints * 3` doubles; `out` to one.
#[no_mangle]
pub unsafe extern "C" fn km_mpjae(
    pred: *const f64,
    truth: *const f64,
    frames: usize,
    joints: usize,
    out: *mut f64,
) -> KmStatus {
    guard(|| {
        let n = frames
            .checked_mul(joints)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Error::InvalidArgument("size overflow".into()))?;
        let set = |v: &[f64]| {
            AngleSet::new(
                (0..joints).map(|j| format!("j{j}")).collect(),
                (0..frames).map(|f| f as f64).collect(),
                v.chunks(3 * joints.max(1))
                    .take(frames)
                    .map(|f| f.chunks(3).map(|e| EulerTriple { x: e[0], y: e[1], z: e[2] }).collect())
                    .collect(),
            )
        };
        let p = set(input(pred, n, "pred")?)?;
        let t = set(input(truth, n, "truth")?)?;
        output(out, 1, "out")?[0] = mpjae(&p, &t)?;
        Ok(())
    })
}

/// Softmax-weighted fusion of `views` per-view volumes, each
/// `side³ × channels` doubles (channel fastest), into `out` (same size as
/// one view).
///
/// # Safety
/// `volumes` points to `views * side³ * channels` doubles and `out` to
/// `side³ * channels`.
#[no_mangle]
pub unsafe extern "C" fn km_aggregate(
    volumes: *const f64,
    views: usize,
    side: usize,
    channels: usize,
    out: *mut f64,
) -> KmStatus {
    guard(|| {
        let per = side
            .checked_pow(3)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::InvalidArgument("size overflow".into()))?;
        let total = per
            .checked_mul(views)
            .ok_or_else(|| Error::InvalidArgument("size overflow".into()))?;
        let data = input(volumes, total, "volumes")?;
        let out = output(out, per, "out")?;
        if per == 0 {
            return Err(Error::InvalidArgument("empty volume".into()).into());
        }
        let vs = data
            .chunks(per)
            .map(|c| ViewVolume::from_values(side, channels, c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        out.copy_from_slice(&aggregate(&vs)?.values);
        Ok(())
    })
}

/// Creates the bundled 14-joint humanoid skeleton.
///
/// # Safety
/// `out` must be a valid pointer; the handle is released with
/// [`km_skeleton_free`].
#[no_mangle]
pub unsafe extern "C" fn km_skeleton_humanoid(out: *mut *mut KmSkeleton) -> KmStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        *out = Box::into_raw(Box::new(KmSkeleton {
            model: KinematicModel::humanoid(),
        }));
        Ok(())
    })
}

/// Parses a skeleton from a NUL-terminated JSON string.
///
/// # Safety
/// `json` is a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn km_skeleton_from_json(json: *const c_char, out: *mut *mut KmSkeleton) -> KmStatus {
    guard(|| {
        if json.is_null() {
            return Err(Fail::Null("json"));
        }
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| Error::InvalidArgument("skeleton JSON is not UTF-8".into()))?;
        *out = Box::into_raw(Box::new(KmSkeleton {
            model: KinematicModel::from_json_str(text)?,
        }));
        Ok(())
    })
}

/// Releases a skeleton handle. NULL is ignored.
///
/// # Safety
/// `skeleton` comes from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn km_skeleton_free(skeleton: *mut KmSkeleton) {
    if !skeleton.is_null() {
        drop(Box::from_raw(skeleton));
    }
}

/// Number of articulated joints and of markers.
///
/// # Safety
/// `skeleton` is a live handle; `joints` and `markers` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn km_skeleton_counts(
    skeleton: *const KmSkeleton,
    joints: *mut usize,
    markers: *mut usize,
) -> KmStatus {
    guard(|| {
        let m = model_of(skeleton)?;
        *joints.as_mut().ok_or(Fail::Null("joints"))? = m.joint_count();
        *markers.as_mut().ok_or(Fail::Null("markers"))? = m.markers().len();
        Ok(())
    })
}

fn pose_from(model: &KinematicModel, root: &[f64], angles: &[f64]) -> Pose {
    Pose {
        root_translation: Vector3::new(root[0], root[1], root[2]),
        angles: angles
            .chunks(3)
            .take(model.joint_count())
            .map(|e| EulerTriple { x: e[0], y: e[1], z: e[2] })
            .collect(),
    }
}

/// World marker positions (`markers × 3`, skeleton order) for a pose given
/// as a root translation (mm) and `joints × 3` Euler angles (degrees).
///
/// # Safety
/// Array sizes as described; `skeleton` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn km_forward_kinematics(
    skeleton: *const KmSkeleton,
    root: *const f64,
    angles: *const f64,
    out_markers: *mut f64,
) -> KmStatus {
    guard(|| {
        let m = model_of(skeleton)?;
        let pose = pose_from(m, input(root, 3, "root")?, input(angles, 3 * m.joint_count(), "angles")?);
        let out = output(out_markers, 3 * m.markers().len(), "out_markers")?;
        let fk = m.forward_kinematics(&pose)?;
        for (o, p) in out.chunks_mut(3).zip(&fk.markers) {
            o.copy_from_slice(p.as_slice());
        }
        Ok(())
    })
}

/// Fits one frame of markers (`markers × 3`, skeleton order; NaN rows are
/// missing). `weights` may be NULL for uniform weights; `init_root` and
/// `init_angles` may both be NULL to start from the rest pose. Writes the
/// solved pose, the weighted residual (mm²) and whether the solver converged.
///
/// # Safety
/// Array sizes as described; `skeleton` is a live handle.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn km_ik_solve_frame(
    skeleton: *const KmSkeleton,
    markers: *const f64,
    weights: *const f64,
    init_root: *const f64,
    init_angles: *const f64,
    out_root: *mut f64,
    out_angles: *mut f64,
    out_residual: *mut f64,
    out_converged: *mut i32,
) -> KmStatus {
    guard(|| {
        let m = model_of(skeleton)?;
        let nm = m.markers().len();
        let j = m.joint_count();
        let pos = input(markers, 3 * nm, "markers")?;
        let frame = MarkerFrame {
            time: 0.0,
            markers: m
                .markers()
                .iter()
                .zip(pos.chunks(3))
                .filter(|(_, p)| p.iter().all(|v| v.is_finite()))
                .map(|(a, p)| (a.name.clone(), Vector3::new(p[0], p[1], p[2])))
                .collect(),
        };
        let w = if weights.is_null() {
            IkWeights::uniform(m)
        } else {
            let w = input(weights, nm, "weights")?;
            IkWeights::new(m.markers().iter().zip(w).map(|(a, &v)| (a.name.clone(), v)).collect())?
        };
        let init = match (init_root.is_null(), init_angles.is_null()) {
            (true, true) => Pose::rest(m),
            (false, false) => pose_from(m, input(init_root, 3, "init_root")?, input(init_angles, 3 * j, "init_angles")?),
            _ => return Err(Error::InvalidArgument("give both init_root and init_angles or neither".into()).into()),
        };
        let r = solve_frame(m, &frame, &w, &init, &IkOptions::default())?;
        output(out_root, 3, "out_root")?.copy_from_slice(r.pose.root_translation.as_slice());
        for (o, e) in output(out_angles, 3 * j, "out_angles")?.chunks_mut(3).zip(&r.pose.angles) {
            o.copy_from_slice(&e.as_array());
        }
        if !out_residual.is_null() {
            *out_residual = r.residual;
        }
        if !out_converged.is_null() {
            *out_converged = i32::from(r.converged);
        }
        Ok(())
    })
}
