//! Rotation representations and conversions to and from SO(3).
//!
//! Four encodings are supported: rotation matrices, Euler triples (degrees,
//! intrinsic Tait–Bryan orders), unit quaternions stored `(w, x, y, z)` and
//! the continuous 6D representation (first two matrix columns, mapped back
//! by Gram–Schmidt). All arithmetic is `f64`; all public angles are degrees.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when validating externally supplied rotation matrices.
pub const ORTHO_INPUT_TOL: f64 = 1e-6;

/// Tolerance on the distance of a quaternion's norm from 1 for it to be
/// accepted (and renormalized) as a unit quaternion.
pub const QUAT_NORM_TOL: f64 = 1e-6;

/// Middle Euler angles within this many degrees of ±90° are treated as gimbal lock.
pub const GIMBAL_TOL_DEG: f64 = 1e-9;

/// Wraps an angle in degrees into `[-180, 180)`.
pub fn canonical_deg(deg: f64) -> f64 {
    let r = (deg + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if r >= 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Wraps an angle difference in degrees into `(-180, 180]`.
pub fn wrap_diff_deg(deg: f64) -> f64 {
    let r = canonical_deg(deg);
    if r == -180.0 {
        180.0
    } else {
        r
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        deg.to_radians().sin_cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::invalid(format!("unknown axis `{other}`"))),
        }
    }
}

/// Right-handed rotation by `deg` degrees about a coordinate axis.
pub fn axis_rotation(axis: Axis, deg: f64) -> Matrix3<f64> {
    let (s, c) = sin_cos_deg(deg);
    match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Derivative of [`axis_rotation`] with respect to the angle in degrees.
pub fn axis_rotation_derivative(axis: Axis, deg: f64) -> Matrix3<f64> {
    let (s, c) = sin_cos_deg(deg);
    let k = std::f64::consts::PI / 180.0;
    let (s, c) = (s * k, c * k);
    match axis {
        Axis::X => Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
        Axis::Y => Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
        Axis::Z => Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    }
}

/// An element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates `m` (orthonormal with determinant +1 within 1e-6 per entry).
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let err = orthogonality_error(&m);
        if err > ORTHO_INPUT_TOL {
            return Err(Error::invalid(format!(
                "matrix is not orthogonal (max |MᵀM − I| = {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_INPUT_TOL {
            return Err(Error::invalid(format!("matrix determinant is {det}, expected +1")));
        }
        Ok(RotationMatrix(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        RotationMatrix(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// Largest entry of `|MᵀM − I|`.
pub fn orthogonality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

/// Euler angles in degrees, each component canonicalized into `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerTriple {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EulerTriple {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        EulerTriple {
            x: canonical_deg(x),
            y: canonical_deg(y),
            z: canonical_deg(z),
        }
    }

    pub fn zero() -> Self {
        EulerTriple::default()
    }

    /// Angles listed in the convention's order (first, middle, last rotation).
    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        EulerTriple::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Intrinsic Tait–Bryan axis order. The triple `(a, b, c)` denotes
/// `R = R_first(a) · R_second(b) · R_third(c)`.
///
/// Components of an [`EulerTriple`] are always named after the axis order of
/// the default convention: `x` is the first angle, `y` the middle, `z` the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EulerConvention {
    order: [Axis; 3],
}

impl Default for EulerConvention {
    fn default() -> Self {
        EulerConvention::XYZ
    }
}

impl EulerConvention {
    pub const XYZ: EulerConvention = EulerConvention {
        order: [Axis::X, Axis::Y, Axis::Z],
    };

    pub fn new(order: [Axis; 3]) -> Result<Self> {
        if order[0] == order[1] || order[1] == order[2] || order[0] == order[2] {
            return Err(Error::invalid(
                "Euler order must use three distinct axes (Tait–Bryan)",
            ));
        }
        Ok(EulerConvention { order })
    }

    pub fn order(&self) -> [Axis; 3] {
        self.order
    }

    /// `+1` for cyclic orders (XYZ, YZX, ZXY), `-1` otherwise.
    fn parity(&self) -> f64 {
        let [i, j, _] = self.order.map(Axis::index);
        if (i + 1) % 3 == j {
            1.0
        } else {
            -1.0
        }
    }

    /// Header tag, e.g. `XYZ_intrinsic`.
    pub fn tag(&self) -> String {
        let s: String = self
            .order
            .iter()
            .map(|a| a.name().to_ascii_uppercase())
            .collect();
        format!("{s}_intrinsic")
    }
}

impl fmt::Display for EulerConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for EulerConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let order = s
            .strip_suffix("_intrinsic")
            .ok_or_else(|| Error::invalid(format!("unsupported Euler convention `{s}`")))?;
        let axes: Vec<Axis> = order
            .chars()
            .map(|c| c.to_string().parse())
            .collect::<Result<_>>()?;
        let order: [Axis; 3] = axes
            .try_into()
            .map_err(|_| Error::invalid(format!("unsupported Euler convention `{s}`")))?;
        EulerConvention::new(order)
    }
}

pub fn euler_to_matrix(e: &EulerTriple, convention: EulerConvention) -> Result<RotationMatrix> {
    if !e.is_finite() {
        return Err(Error::invalid("Euler angles must be finite"));
    }
    Ok(RotationMatrix(euler_to_matrix_raw(e.as_array(), convention)))
}

/// Euler-to-matrix without finiteness checks or canonicalization.
pub(crate) fn euler_to_matrix_raw(angles: [f64; 3], convention: EulerConvention) -> Matrix3<f64> {
    let [a, b, c] = convention.order;
    axis_rotation(a, angles[0]) * axis_rotation(b, angles[1]) * axis_rotation(c, angles[2])
}

/// Extracts Euler angles; in gimbal lock the third angle is fixed to 0.
pub fn matrix_to_euler(m: &RotationMatrix, convention: EulerConvention) -> EulerTriple {
    let r = &m.0;
    let [ai, aj, ak] = convention.order;
    let (i, j, k) = (ai.index(), aj.index(), ak.index());
    let eps = convention.parity();

    let cos_mid = r[(i, i)].hypot(r[(i, j)]);
    let first = if cos_mid < GIMBAL_TOL_DEG.to_radians().sin() {
        // Only first ± third is observable; fold it into the first angle.
        (eps * r[(k, j)]).atan2(r[(j, j)]).to_degrees()
    } else {
        (-eps * r[(j, k)]).atan2(r[(k, k)]).to_degrees()
    };
    // Peel off the first rotation and read the other two from the remainder,
    // which keeps the result accurate close to the singularity.
    let rest = axis_rotation(ai, first).transpose() * r;
    let middle = (eps * rest[(i, k)]).atan2(rest[(k, k)]).to_degrees();
    let third = if cos_mid < GIMBAL_TOL_DEG.to_radians().sin() {
        0.0
    } else {
        (eps * rest[(j, i)]).atan2(rest[(j, j)]).to_degrees()
    };
    EulerTriple::new(first, middle, third)
}

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        UnitQuaternion {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Accepts components whose norm is within 1e-6 of one and renormalizes.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::invalid(format!(
                "quaternion norm {n} is not within {QUAT_NORM_TOL} of 1"
            )));
        }
        Self::from_raw([w, x, y, z])
    }

    /// Normalizes an arbitrary nonzero 4-vector.
    pub fn from_raw(q: [f64; 4]) -> Result<Self> {
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if !n2.is_finite() || n2 == 0.0 {
            return Err(Error::invalid("quaternion has zero or non-finite norm"));
        }
        let n = n2.sqrt();
        Ok(UnitQuaternion {
            w: q[0] / n,
            x: q[1] / n,
            y: q[2] / n,
            z: q[3] / n,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

impl std::ops::Neg for UnitQuaternion {
    type Output = UnitQuaternion;

    fn neg(self) -> Self {
        UnitQuaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

pub fn quat_to_matrix(q: &UnitQuaternion) -> RotationMatrix {
    RotationMatrix(quat_to_matrix_raw([q.w, q.x, q.y, q.z]))
}

pub(crate) fn quat_to_matrix_raw(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion of a rotation matrix, sign chosen so that `w >= 0`.
pub fn matrix_to_quat(m: &RotationMatrix) -> UnitQuaternion {
    let r = &m.0;
    let trace = r.trace();
    // Shepperd: branch on the largest diagonal term of the 4x4 symmetric form.
    let q = if trace > r[(0, 0)] && trace > r[(1, 1)] && trace > r[(2, 2)] {
        let s = (1.0 + trace).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = UnitQuaternion::from_raw(q).expect("rotation matrix yields a nonzero quaternion");
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Two 3-vectors whose Gram–Schmidt orthonormalization gives the first two
/// columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SixDRep {
    pub a1: Vector3<f64>,
    pub a2: Vector3<f64>,
}

impl SixDRep {
    pub fn new(a1: Vector3<f64>, a2: Vector3<f64>) -> Self {
        SixDRep { a1, a2 }
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        SixDRep {
            a1: Vector3::new(v[0], v[1], v[2]),
            a2: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z,
        ]
    }
}

pub fn sixd_to_matrix(r: &SixDRep) -> Result<RotationMatrix> {
    let n1 = r.a1.norm();
    if !n1.is_finite() || n1 <= 1e-12 {
        return Err(Error::DegenerateRepresentation(
            "first 6D column has (near-)zero norm".into(),
        ));
    }
    let n2 = r.a2.norm();
    let sin_angle = if n2 > 0.0 {
        r.a1.cross(&r.a2).norm() / (n1 * n2)
    } else {
        0.0
    };
    if !sin_angle.is_finite() || sin_angle <= 1e-9 {
        return Err(Error::DegenerateRepresentation(
            "6D columns are parallel or zero".into(),
        ));
    }
    let b1 = r.a1 / n1;
    let u = r.a2 - b1 * b1.dot(&r.a2);
    let b2 = u / u.norm();
    let b3 = b1.cross(&b2);
    Ok(RotationMatrix(Matrix3::from_columns(&[b1, b2, b3])))
}

pub fn matrix_to_sixd(m: &RotationMatrix) -> SixDRep {
    SixDRep {
        a1: m.0.column(0).into_owned(),
        a2: m.0.column(1).into_owned(),
    }
}

/// Angle of the relative rotation `aᵀb`, in degrees within `[0, 180]`.
pub fn geodesic_deg(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    let tr = a.0.component_mul(&b.0).sum();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Per-frame Euler angles for an ordered list of joints.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleSet {
    pub joints: Vec<String>,
    /// Sample times in seconds, one per frame.
    pub times: Vec<f64>,
    pub frames: Vec<Vec<EulerTriple>>,
}

impl AngleSet {
    pub fn new(joints: Vec<String>, times: Vec<f64>, frames: Vec<Vec<EulerTriple>>) -> Result<Self> {
        if times.len() != frames.len() {
            return Err(Error::shape(format!(
                "{} times for {} frames",
                times.len(),
                frames.len()
            )));
        }
        if let Some((t, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != joints.len()) {
            return Err(Error::shape(format!(
                "frame {t} has {} joints, expected {}",
                f.len(),
                joints.len()
            )));
        }
        Ok(AngleSet {
            joints,
            times,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// MPJAE with its per-joint and per-frame breakdown (degrees).
#[derive(Debug, Clone, PartialEq)]
pub struct MpjaeReport {
    pub mean: f64,
    pub per_joint: Vec<(String, f64)>,
    pub per_frame: Vec<f64>,
}

impl MpjaeReport {
    pub fn joint(&self, name: &str) -> Option<f64> {
        self.per_joint.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

fn check_compatible(pred: &AngleSet, gt: &AngleSet) -> Result<()> {
    if pred.joints != gt.joints {
        return Err(Error::shape("prediction and ground truth joint lists differ"));
    }
    if pred.frames.len() != gt.frames.len() {
        return Err(Error::shape(format!(
            "prediction has {} frames, ground truth {}",
            pred.frames.len(),
            gt.frames.len()
        )));
    }
    if pred.frames.is_empty() || pred.joints.is_empty() {
        return Err(Error::invalid("MPJAE needs at least one frame and one joint"));
    }
    Ok(())
}

/// Mean per-joint angle error in degrees, averaged over frames.
pub fn mpjae(pred: &AngleSet, gt: &AngleSet) -> Result<f64> {
    Ok(mpjae_report(pred, gt)?.mean)
}

pub fn mpjae_report(pred: &AngleSet, gt: &AngleSet) -> Result<MpjaeReport> {
    check_compatible(pred, gt)?;
    let n_joints = gt.joints.len();
    let mut per_joint = vec![0.0; n_joints];
    let per_frame: Vec<f64> = pred
        .frames
        .iter()
        .zip(&gt.frames)
        .map(|(p, g)| {
            let mut sum = 0.0;
            for (j, (pj, gj)) in p.iter().zip(g).enumerate() {
                let err: f64 = pj
                    .as_array()
                    .iter()
                    .zip(gj.as_array())
                    .map(|(a, b)| wrap_diff_deg(a - b).abs())
                    .sum();
                per_joint[j] += err / 3.0;
                sum += err;
            }
            sum / (3 * n_joints) as f64
        })
        .collect();
    let frames = per_frame.len() as f64;
    Ok(MpjaeReport {
        mean: per_frame.iter().sum::<f64>() / frames,
        per_joint: gt
            .joints
            .iter()
            .cloned()
            .zip(per_joint.into_iter().map(|v| v / frames))
            .collect(),
        per_frame,
    })
}
