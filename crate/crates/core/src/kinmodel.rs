//! Rooted segment trees with forward kinematics, virtual markers and
//! per-segment scaling.
//!
//! Every segment frame has its origin at the segment's proximal joint. At the
//! rest pose all frames are parallel to the world frame, so offsets read
//! directly as rest-pose displacements. The distal endpoint (`tip`) of a
//! segment is the offset of its first child, or an explicit `tip_mm` for
//! terminal segments; `length_mm` is the distance from the joint to the tip.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotmath::{euler_to_matrix_raw, Axis, EulerConvention, EulerTriple};

/// The bundled 14-joint, 40-marker humanoid.
pub const HUMANOID_SKELETON_JSON: &str = include_str!("../assets/humanoid14.json");
/// Default IK weights for the bundled humanoid (knees and elbows doubled).
pub const HUMANOID_WEIGHTS_JSON: &str = include_str!("../assets/humanoid14_weights.json");

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    /// Name of the joint at the proximal end.
    pub joint: String,
    pub parent: Option<usize>,
    pub offset_in_parent: Vector3<f64>,
    pub dof: Vec<Axis>,
    pub length_mm: f64,
    pub tip: Vector3<f64>,
    /// Whether `tip` was given explicitly rather than taken from a child.
    explicit_tip: bool,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkerAttachment {
    pub name: String,
    pub segment: usize,
    pub local_offset: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    /// Parents precede children (depth-first order from the root).
    segments: Vec<Segment>,
    markers: Vec<MarkerAttachment>,
    /// Segment index of each articulated joint, in joint order.
    joints: Vec<usize>,
    convention: EulerConvention,
    /// Default marker pairs used to measure each segment when scaling.
    pub scale_pairs: BTreeMap<String, (String, String)>,
}

/// Root translation plus one Euler triple per articulated joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub root_translation: Vector3<f64>,
    pub angles: Vec<EulerTriple>,
}

impl Pose {
    pub fn rest(model: &KinematicModel) -> Self {
        Pose {
            root_translation: Vector3::zeros(),
            angles: vec![EulerTriple::zero(); model.joint_count()],
        }
    }
}

/// Experimental marker positions (mm) at one instant; missing markers are absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarkerFrame {
    pub time: f64,
    pub markers: BTreeMap<String, Vector3<f64>>,
}

impl MarkerFrame {
    pub fn get(&self, name: &str) -> Option<&Vector3<f64>> {
        self.markers.get(name)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarkerSequence {
    /// Column order for writing.
    pub names: Vec<String>,
    pub frames: Vec<MarkerFrame>,
}

/// World-space output of forward kinematics.
#[derive(Debug, Clone, PartialEq)]
pub struct FkResult {
    /// Root position followed by every articulated joint, in joint order (J+1).
    pub joints: Vec<Vector3<f64>>,
    /// Marker positions in model marker order.
    pub markers: Vec<Vector3<f64>>,
    /// Per-segment world rotation and joint position, in model segment order.
    pub rotations: Vec<Matrix3<f64>>,
    pub origins: Vec<Vector3<f64>>,
}

// --- skeleton JSON ---------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub euler_convention: Option<String>,
    pub joints_order: Vec<String>,
    pub segments: Vec<SegmentEntry>,
    pub markers: Vec<MarkerEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scale_pairs: BTreeMap<String, [String; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<String>,
    pub parent: Option<String>,
    pub offset_mm: [f64; 3],
    #[serde(default)]
    pub dof: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_mm: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_mm: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkerEntry {
    pub name: String,
    pub segment: String,
    pub offset_mm: [f64; 3],
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl KinematicModel {
    /// The bundled humanoid skeleton.
    pub fn humanoid() -> Self {
        Self::from_json_str(HUMANOID_SKELETON_JSON).expect("bundled skeleton is valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(s)
            .map_err(|e| Error::invalid(format!("skeleton JSON: {e}")))?;
        Self::from_file(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SkeletonFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        Self::from_file(&file).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::parse(path, 1, "segments", msg),
            other => other,
        })
    }

    pub fn from_file(file: &SkeletonFile) -> Result<Self> {
        let convention = match &file.euler_convention {
            Some(tag) => tag.parse()?,
            None => EulerConvention::default(),
        };
        let mut by_name: HashMap<&str, usize> = HashMap::new();
        for (i, s) in file.segments.iter().enumerate() {
            if by_name.insert(&s.name, i).is_some() {
                return Err(Error::invalid(format!("duplicate segment `{}`", s.name)));
            }
        }
        let mut roots = Vec::new();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); file.segments.len()];
        for (i, s) in file.segments.iter().enumerate() {
            match &s.parent {
                None => roots.push(i),
                Some(p) => {
                    let pi = *by_name.get(p.as_str()).ok_or_else(|| {
                        Error::invalid(format!("segment `{}` has unknown parent `{p}`", s.name))
                    })?;
                    children[pi].push(i);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::invalid(format!(
                "skeleton needs exactly one root segment, found {}",
                roots.len()
            )));
        }
        // Depth-first order; anything unreachable sits on a cycle.
        let mut order = Vec::with_capacity(file.segments.len());
        let mut stack = vec![roots[0]];
        while let Some(i) = stack.pop() {
            order.push(i);
            stack.extend(children[i].iter().rev());
        }
        if order.len() != file.segments.len() {
            return Err(Error::invalid("segment tree contains a cycle"));
        }
        let new_index: HashMap<usize, usize> = order.iter().enumerate().map(|(n, &o)| (o, n)).collect();

        let mut segments = Vec::with_capacity(order.len());
        for &old in &order {
            let e = &file.segments[old];
            let dof = e
                .dof
                .iter()
                .map(|a| a.parse::<Axis>())
                .collect::<Result<Vec<_>>>()?;
            for (k, a) in dof.iter().enumerate() {
                if dof[..k].contains(a) {
                    return Err(Error::invalid(format!("segment `{}` repeats axis {}", e.name, a.name())));
                }
            }
            let kids: Vec<usize> = children[old].iter().map(|c| new_index[c]).collect();
            let tip = match (e.tip_mm, children[old].first()) {
                (Some(t), _) => vec3(t),
                (None, Some(&c)) => vec3(file.segments[c].offset_mm),
                (None, None) if e.parent.is_none() => Vector3::zeros(),
                (None, None) => {
                    return Err(Error::invalid(format!(
                        "terminal segment `{}` needs `tip_mm`",
                        e.name
                    )))
                }
            };
            let length = tip.norm();
            if e.parent.is_some() && !(length > 0.0) {
                return Err(Error::invalid(format!("segment `{}` has zero length", e.name)));
            }
            if let Some(l) = e.length_mm {
                if (l - length).abs() > 1e-6 {
                    return Err(Error::invalid(format!(
                        "segment `{}`: length_mm {l} disagrees with its tip distance {length}",
                        e.name
                    )));
                }
            }
            segments.push(Segment {
                name: e.name.clone(),
                joint: e.joint.clone().unwrap_or_else(|| e.name.clone()),
                parent: e.parent.as_ref().map(|p| new_index[&by_name[p.as_str()]]),
                offset_in_parent: vec3(e.offset_mm),
                dof,
                length_mm: length,
                tip,
                explicit_tip: e.tip_mm.is_some(),
                children: kids,
            });
        }

        let articulated: Vec<usize> = (0..segments.len())
            .filter(|&i| segments[i].parent.is_some() && !segments[i].dof.is_empty())
            .collect();
        if file.joints_order.len() != articulated.len() {
            return Err(Error::invalid(format!(
                "joints_order lists {} joints but the skeleton has {} articulated segments",
                file.joints_order.len(),
                articulated.len()
            )));
        }
        let joints = file
            .joints_order
            .iter()
            .map(|j| {
                articulated
                    .iter()
                    .copied()
                    .find(|&i| segments[i].joint == *j)
                    .ok_or_else(|| Error::invalid(format!("joints_order names unknown joint `{j}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, j) in joints.iter().enumerate() {
            if joints[..k].contains(j) {
                return Err(Error::invalid(format!("joint `{}` listed twice", segments[*j].joint)));
            }
        }

        let seg_index: HashMap<&str, usize> =
            segments.iter().enumerate().map(|(i, s)| (s.name.as_str(), i)).collect();
        let mut markers = Vec::with_capacity(file.markers.len());
        for m in &file.markers {
            let segment = *seg_index.get(m.segment.as_str()).ok_or_else(|| {
                Error::invalid(format!("marker `{}` on unknown segment `{}`", m.name, m.segment))
            })?;
            if markers.iter().any(|x: &MarkerAttachment| x.name == m.name) {
                return Err(Error::invalid(format!("duplicate marker `{}`", m.name)));
            }
            markers.push(MarkerAttachment {
                name: m.name.clone(),
                segment,
                local_offset: vec3(m.offset_mm),
            });
        }
        let scale_pairs = file
            .scale_pairs
            .iter()
            .map(|(k, [a, b])| (k.clone(), (a.clone(), b.clone())))
            .collect();
        Ok(KinematicModel {
            segments,
            markers,
            joints,
            convention,
            scale_pairs,
        })
    }

    /// Serializable form; `from_file(to_file())` reproduces the model.
    pub fn to_file(&self) -> SkeletonFile {
        SkeletonFile {
            euler_convention: Some(self.convention.tag()),
            joints_order: self.joint_names(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentEntry {
                    name: s.name.clone(),
                    joint: Some(s.joint.clone()),
                    parent: s.parent.map(|p| self.segments[p].name.clone()),
                    offset_mm: arr3(&s.offset_in_parent),
                    dof: s.dof.iter().map(|a| a.name().to_string()).collect(),
                    tip_mm: s.explicit_tip.then(|| arr3(&s.tip)),
                    length_mm: None,
                })
                .collect(),
            markers: self
                .markers
                .iter()
                .map(|m| MarkerEntry {
                    name: m.name.clone(),
                    segment: self.segments[m.segment].name.clone(),
                    offset_mm: arr3(&m.local_offset),
                })
                .collect(),
            scale_pairs: self
                .scale_pairs
                .iter()
                .map(|(k, (a, b))| (k.clone(), [a.clone(), b.clone()]))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("skeleton serializes")
    }

    pub fn convention(&self) -> EulerConvention {
        self.convention
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn markers(&self) -> &[MarkerAttachment] {
        &self.markers
    }

    pub fn marker_names(&self) -> Vec<String> {
        self.markers.iter().map(|m| m.name.clone()).collect()
    }

    pub fn marker_index(&self, name: &str) -> Option<usize> {
        self.markers.iter().position(|m| m.name == name)
    }

    pub fn segment_index(&self, name: &str) -> Option<usize> {
        self.segments.iter().position(|s| s.name == name)
    }

    /// J, the number of articulated joints.
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|&i| self.segments[i].joint.clone()).collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|&i| self.segments[i].joint == name)
    }

    /// Segment driven by joint `j`.
    pub fn joint_segment(&self, j: usize) -> &Segment {
        &self.segments[self.joints[j]]
    }

    pub fn root_name(&self) -> &str {
        &self.segments[0].joint
    }

    /// Position of `axis` within the Euler triple of the model's convention.
    pub fn component_of(&self, axis: Axis) -> usize {
        self.convention
            .order()
            .iter()
            .position(|&a| a == axis)
            .expect("convention uses all three axes")
    }

    /// Number of free parameters: root translation plus every unlocked angle.
    pub fn param_count(&self) -> usize {
        3 + self.joints.iter().map(|&i| self.segments[i].dof.len()).sum::<usize>()
    }

    pub fn pose_to_params(&self, pose: &Pose) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend(pose.root_translation.iter());
        for (j, &si) in self.joints.iter().enumerate() {
            let a = pose.angles[j].as_array();
            for &axis in &self.segments[si].dof {
                p.push(a[self.component_of(axis)]);
            }
        }
        p
    }

    /// Inverse of [`pose_to_params`](Self::pose_to_params); angles are not canonicalized.
    pub fn params_to_pose(&self, params: &[f64]) -> Pose {
        let mut angles = Vec::with_capacity(self.joints.len());
        let mut k = 3;
        for &si in &self.joints {
            let mut a = [0.0; 3];
            for &axis in &self.segments[si].dof {
                a[self.component_of(axis)] = params[k];
                k += 1;
            }
            angles.push(EulerTriple {
                x: a[0],
                y: a[1],
                z: a[2],
            });
        }
        Pose {
            root_translation: Vector3::new(params[0], params[1], params[2]),
            angles,
        }
    }

    /// Checks joint count and that locked axes carry zero.
    pub fn check_pose(&self, pose: &Pose) -> Result<()> {
        if pose.angles.len() != self.joints.len() {
            return Err(Error::shape(format!(
                "pose has {} joint angles, model has {} joints",
                pose.angles.len(),
                self.joints.len()
            )));
        }
        for (j, &si) in self.joints.iter().enumerate() {
            let a = pose.angles[j].as_array();
            for axis in Axis::ALL {
                if !self.segments[si].dof.contains(&axis) && a[self.component_of(axis)] != 0.0 {
                    return Err(Error::invalid(format!(
                        "joint `{}` is locked about {} but has a nonzero angle",
                        self.segments[si].joint,
                        axis.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Local rotation of every segment for `pose` (identity for fixed ones).
    fn local_rotations(&self, pose: &Pose) -> Vec<Matrix3<f64>> {
        let mut rots = vec![Matrix3::identity(); self.segments.len()];
        for (j, &si) in self.joints.iter().enumerate() {
            rots[si] = euler_to_matrix_raw(pose.angles[j].as_array(), self.convention);
        }
        rots
    }

    pub fn forward_kinematics(&self, pose: &Pose) -> Result<FkResult> {
        self.check_pose(pose)?;
        Ok(self.fk_unchecked(pose))
    }

    /// Forward kinematics without validating the pose; locked components are
    /// used as given.
    pub(crate) fn fk_unchecked(&self, pose: &Pose) -> FkResult {
        let local = self.local_rotations(pose);
        let n = self.segments.len();
        let mut rotations = Vec::with_capacity(n);
        let mut origins = Vec::with_capacity(n);
        for (i, s) in self.segments.iter().enumerate() {
            let (r, o) = match s.parent {
                None => (local[i], pose.root_translation + s.offset_in_parent),
                Some(p) => {
                    let rp: &Matrix3<f64> = &rotations[p];
                    (rp * local[i], origins[p] + rp * s.offset_in_parent)
                }
            };
            rotations.push(r);
            origins.push(o);
        }
        let mut joints = Vec::with_capacity(self.joints.len() + 1);
        joints.push(origins[0]);
        joints.extend(self.joints.iter().map(|&si| origins[si]));
        let markers = self
            .markers
            .iter()
            .map(|m| origins[m.segment] + rotations[m.segment] * m.local_offset)
            .collect();
        FkResult {
            joints,
            markers,
            rotations,
            origins,
        }
    }

    /// World position of segment `i`'s distal endpoint.
    pub fn tip_position(&self, fk: &FkResult, i: usize) -> Vector3<f64> {
        fk.origins[i] + fk.rotations[i] * self.segments[i].tip
    }

    /// Distal endpoint of every articulated segment, in joint order (J points).
    /// These are the keypoints rendered into heatmaps.
    pub fn keypoints(&self, fk: &FkResult) -> Vec<Vector3<f64>> {
        self.joints.iter().map(|&si| self.tip_position(fk, si)).collect()
    }

    /// Scales segment `i` isotropically: its length, tip, child joint offsets
    /// and attached markers.
    pub fn scale_segment(&mut self, i: usize, s: f64) {
        let seg = &mut self.segments[i];
        seg.length_mm *= s;
        seg.tip *= s;
        let kids = seg.children.clone();
        for c in kids {
            self.segments[c].offset_in_parent *= s;
        }
        for m in self.markers.iter_mut().filter(|m| m.segment == i) {
            m.local_offset *= s;
        }
    }

    /// Copy of the model with a different marker set.
    pub fn with_markers(&self, markers: Vec<MarkerAttachment>) -> Self {
        KinematicModel {
            markers,
            ..self.clone()
        }
    }

    /// Marker attachments at the root joint and at the distal endpoint of
    /// every articulated segment, named `<joint>` and `<joint>_end`.
    pub fn joint_center_markers(&self) -> Vec<MarkerAttachment> {
        let mut out = vec![MarkerAttachment {
            name: self.root_name().to_string(),
            segment: 0,
            local_offset: Vector3::zeros(),
        }];
        out.extend(self.joints.iter().map(|&si| MarkerAttachment {
            name: format!("{}_end", self.segments[si].joint),
            segment: si,
            local_offset: self.segments[si].tip,
        }));
        out
    }

    /// Rebuild the marker frame for a given pose (noise-free virtual markers).
    pub fn marker_frame(&self, pose: &Pose, time: f64) -> Result<MarkerFrame> {
        let fk = self.forward_kinematics(pose)?;
        Ok(MarkerFrame {
            time,
            markers: self
                .markers
                .iter()
                .zip(fk.markers)
                .map(|(m, p)| (m.name.clone(), p))
                .collect(),
        })
    }
}

/// Euclidean distance between two markers of one frame.
pub fn segment_length_from_markers(frame: &MarkerFrame, a: &str, b: &str) -> Result<f64> {
    let pa = marker_in(frame, a)?;
    let pb = marker_in(frame, b)?;
    Ok((pa - pb).norm())
}

fn marker_in<'a>(frame: &'a MarkerFrame, name: &str) -> Result<&'a Vector3<f64>> {
    match frame.get(name) {
        Some(p) if p.iter().all(|v| v.is_finite()) => Ok(p),
        _ => Err(Error::MissingData(format!(
            "marker `{name}` missing at t = {}",
            frame.time
        ))),
    }
}

/// Mean inter-marker distance over the frames where both markers are present.
pub fn mean_segment_length(seq: &MarkerSequence, a: &str, b: &str) -> Result<f64> {
    let d: Vec<f64> = seq
        .frames
        .iter()
        .filter_map(|f| segment_length_from_markers(f, a, b).ok())
        .collect();
    if d.is_empty() {
        return Err(Error::MissingData(format!(
            "markers `{a}` and `{b}` are never both present"
        )));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Scales each listed segment by `s = dᵉ/dᵛ` (experimental over virtual
/// inter-marker distance, the latter measured at the rest pose).
pub fn scale_model(
    model: &KinematicModel,
    experimental: &MarkerSequence,
    segment_marker_pairs: &BTreeMap<String, (String, String)>,
) -> Result<(KinematicModel, BTreeMap<String, f64>)> {
    let rest = model.marker_frame(&Pose::rest(model), 0.0)?;
    let mut factors = BTreeMap::new();
    for (segment, (a, b)) in segment_marker_pairs {
        let si = model
            .segment_index(segment)
            .ok_or_else(|| Error::invalid(format!("unknown segment `{segment}`")))?;
        let dv = segment_length_from_markers(&rest, a, b)?;
        if dv < 1.0 {
            return Err(Error::DegenerateVirtualDistance {
                segment: segment.clone(),
                distance_mm: dv,
            });
        }
        let de = mean_segment_length(experimental, a, b)?;
        factors.insert(segment.clone(), (si, de / dv));
    }
    let mut scaled = model.clone();
    for &(si, s) in factors.values() {
        scaled.scale_segment(si, s);
    }
    Ok((scaled, factors.into_iter().map(|(k, (_, s))| (k, s)).collect()))
}
