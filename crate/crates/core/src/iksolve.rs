//! Marker-based inverse kinematics: per-frame Levenberg–Marquardt on the
//! weighted marker least-squares objective, and warm-started sequences.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{Error, Result};
use crate::kinmodel::{KinematicModel, MarkerFrame, MarkerSequence, Pose};
use crate::rotmath::{canonical_deg, AngleSet, Axis, EulerTriple};

/// Nonnegative per-marker weights. Markers absent from the map are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct IkWeights(BTreeMap<String, f64>);

impl IkWeights {
    pub fn new(weights: BTreeMap<String, f64>) -> Result<Self> {
        if let Some((name, w)) = weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("weight of `{name}` is {w}; weights must be finite and >= 0")));
        }
        if !weights.values().any(|&w| w > 0.0) {
            return Err(Error::invalid("at least one marker weight must be positive"));
        }
        Ok(IkWeights(weights))
    }

    /// Weight 1 for every marker of the model.
    pub fn uniform(model: &KinematicModel) -> Self {
        IkWeights(model.markers().iter().map(|m| (m.name.clone(), 1.0)).collect())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let map: BTreeMap<String, f64> =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("weights JSON: {e}")))?;
        Self::new(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, f64> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        Self::new(map).map_err(|e| Error::parse(path, 1, "weights", e.to_string()))
    }

    pub fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(0.0)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|(n, w)| (n.clone(), w * k)).collect())
    }

    pub fn as_map(&self) -> &BTreeMap<String, f64> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkOptions {
    pub max_iterations: usize,
    /// Stop when `‖Jᵀr‖∞` falls below this (mm²/unit).
    pub gradient_tol: f64,
    /// Stop when a proposed step has norm below this.
    pub step_tol: f64,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    /// Central-difference steps.
    pub angle_step_deg: f64,
    pub translation_step_mm: f64,
    /// Results are flagged low-rank below this smallest singular value.
    pub low_rank_tol: f64,
    /// Optional per-joint, per-axis `[min, max]` limits in degrees.
    pub joint_limits: BTreeMap<String, BTreeMap<Axis, [f64; 2]>>,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            max_iterations: 200,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            angle_step_deg: 1e-4,
            translation_step_mm: 1e-2,
            low_rank_tol: 1e-8,
            joint_limits: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkResult {
    pub pose: Pose,
    /// Weighted SSE (mm²) at `pose`; NaN when the frame could not be solved.
    pub residual: f64,
    pub initial_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Smallest singular value of the weighted Jacobian fell below tolerance.
    pub low_rank: bool,
    /// Unweighted distance (mm) per marker that took part in the fit.
    pub marker_errors: Vec<(String, f64)>,
    pub diagnostic: Option<String>,
}

/// Weighted markers of one frame resolved against the model.
struct Targets {
    model_index: Vec<usize>,
    sqrt_w: Vec<f64>,
    positions: Vec<Vector3<f64>>,
}

impl Targets {
    fn resolve(model: &KinematicModel, frame: &MarkerFrame, weights: &IkWeights) -> Result<Self> {
        for name in weights.as_map().keys() {
            if model.marker_index(name).is_none() {
                return Err(Error::invalid(format!("weighted marker `{name}` is not on the model")));
            }
        }
        let mut t = Targets {
            model_index: Vec::new(),
            sqrt_w: Vec::new(),
            positions: Vec::new(),
        };
        for (i, m) in model.markers().iter().enumerate() {
            let w = weights.get(&m.name);
            match frame.get(&m.name) {
                Some(p) if w > 0.0 && p.iter().all(|v| v.is_finite()) => {
                    t.model_index.push(i);
                    t.sqrt_w.push(w.sqrt());
                    t.positions.push(*p);
                }
                _ => {}
            }
        }
        if t.model_index.is_empty() {
            return Err(Error::UnsolvableFrame(format!(
                "no positively weighted marker present at t = {}",
                frame.time
            )));
        }
        Ok(t)
    }

    fn residuals(&self, model: &KinematicModel, pose: &Pose) -> DVector<f64> {
        let fk = model.fk_unchecked(pose);
        let mut r = DVector::zeros(3 * self.model_index.len());
        for (k, (&mi, (&sw, p))) in self
            .model_index
            .iter()
            .zip(self.sqrt_w.iter().zip(&self.positions))
            .enumerate()
        {
            let d = (fk.markers[mi] - p) * sw;
            r[3 * k] = d.x;
            r[3 * k + 1] = d.y;
            r[3 * k + 2] = d.z;
        }
        r
    }
}

/// `Σᵢ wᵢ ‖mᵉᵢ − mᵛᵢ(pose)‖²` over markers present in the frame.
pub fn objective(model: &KinematicModel, pose: &Pose, frame: &MarkerFrame, weights: &IkWeights) -> Result<f64> {
    model.check_pose(pose)?;
    let targets = Targets::resolve(model, frame, weights)?;
    let fk = model.fk_unchecked(pose);
    Ok(targets
        .model_index
        .iter()
        .zip(&targets.positions)
        .map(|(&mi, p)| weights.get(&model.markers()[mi].name) * (fk.markers[mi] - p).norm_squared())
        .sum())
}

/// Parameter-space bounds from the joint limits (infinite where unset).
fn param_bounds(model: &KinematicModel, opts: &IkOptions) -> Vec<[f64; 2]> {
    let mut b = vec![[f64::NEG_INFINITY, f64::INFINITY]; 3];
    for j in 0..model.joint_count() {
        let seg = model.joint_segment(j);
        let limits = opts.joint_limits.get(&seg.joint);
        for axis in &seg.dof {
            b.push(
                limits
                    .and_then(|l| l.get(axis))
                    .copied()
                    .unwrap_or([f64::NEG_INFINITY, f64::INFINITY]),
            );
        }
    }
    b
}

fn project(p: &mut DVector<f64>, bounds: &[[f64; 2]]) {
    for (v, [lo, hi]) in p.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

fn jacobian(model: &KinematicModel, targets: &Targets, p: &DVector<f64>, opts: &IkOptions) -> DMatrix<f64> {
    let n = p.len();
    let m = 3 * targets.model_index.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut q = p.clone();
    for c in 0..n {
        let h = if c < 3 { opts.translation_step_mm } else { opts.angle_step_deg };
        let orig = q[c];
        q[c] = orig + h;
        let rp = targets.residuals(model, &model.params_to_pose(q.as_slice()));
        q[c] = orig - h;
        let rm = targets.residuals(model, &model.params_to_pose(q.as_slice()));
        q[c] = orig;
        jac.set_column(c, &((rp - rm) / (2.0 * h)));
    }
    jac
}

fn canonical_pose(pose: &Pose) -> Pose {
    Pose {
        root_translation: pose.root_translation,
        angles: pose
            .angles
            .iter()
            .map(|e| EulerTriple::new(e.x, e.y, e.z))
            .collect(),
    }
}

/// Fits one frame by Levenberg–Marquardt over the root translation and all
/// unlocked joint angles, starting from `init`.
pub fn solve_frame(
    model: &KinematicModel,
    frame: &MarkerFrame,
    weights: &IkWeights,
    init: &Pose,
    opts: &IkOptions,
) -> Result<IkResult> {
    model.check_pose(init)?;
    let targets = Targets::resolve(model, frame, weights)?;
    let bounds = param_bounds(model, opts);
    let mut p = DVector::from_vec(model.pose_to_params(init));
    project(&mut p, &bounds);

    let cost_of = |p: &DVector<f64>| targets.residuals(model, &model.params_to_pose(p.as_slice())).norm_squared();
    let initial_residual = objective(model, init, frame, weights)?;
    let mut r = targets.residuals(model, &model.params_to_pose(p.as_slice()));
    let mut cost = r.norm_squared();
    let mut lambda = opts.lambda_init;
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;
    let mut jac = jacobian(model, &targets, &p, opts);

    while iterations < opts.max_iterations {
        iterations += 1;
        let g = jac.tr_mul(&r);
        if g.amax() < opts.gradient_tol {
            converged = true;
            break;
        }
        let a = jac.tr_mul(&jac);
        let mut accepted = false;
        loop {
            let mut damped = a.clone();
            for d in 0..damped.nrows() {
                damped[(d, d)] += lambda * (a[(d, d)] + 1e-12);
            }
            let step = match damped.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => {
                    lambda *= opts.lambda_factor;
                    continue;
                }
            };
            if step.norm() < opts.step_tol {
                converged = true;
                break;
            }
            let mut trial = &p + &step;
            project(&mut trial, &bounds);
            let trial_cost = cost_of(&trial);
            if trial_cost < cost {
                p = trial;
                cost = trial_cost;
                lambda /= opts.lambda_factor;
                accepted = true;
                break;
            }
            lambda *= opts.lambda_factor;
            if lambda > 1e32 {
                diagnostic = Some(format!(
                    "stalled: no damping decreases the objective (cost {cost:.6e} mm², ‖g‖∞ {:.3e})",
                    g.amax()
                ));
                break;
            }
        }
        if converged || !accepted {
            break;
        }
        r = targets.residuals(model, &model.params_to_pose(p.as_slice()));
        jac = jacobian(model, &targets, &p, opts);
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("iteration limit {} reached", opts.max_iterations));
    }

    let low_rank = jac
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, &s| m.min(s))
        < opts.low_rank_tol;
    let pose = canonical_pose(&model.params_to_pose(p.as_slice()));
    let fk = model.fk_unchecked(&pose);
    let marker_errors = targets
        .model_index
        .iter()
        .zip(&targets.positions)
        .map(|(&mi, q)| (model.markers()[mi].name.clone(), (fk.markers[mi] - q).norm()))
        .collect();
    let residual = objective(model, &pose, frame, weights)?;
    Ok(IkResult {
        pose,
        residual,
        initial_residual,
        iterations,
        converged,
        low_rank,
        marker_errors,
        diagnostic,
    })
}

/// Solves every frame, warm-starting each from the previous solution
/// (frame 0 starts at the rest pose). Unsolvable frames are reported as
/// unconverged and keep the previous pose.
pub fn solve_sequence(
    model: &KinematicModel,
    seq: &MarkerSequence,
    weights: &IkWeights,
    opts: &IkOptions,
) -> Result<Vec<IkResult>> {
    if seq.frames.is_empty() {
        return Err(Error::invalid("marker sequence is empty"));
    }
    let mut init = Pose::rest(model);
    let mut out = Vec::with_capacity(seq.frames.len());
    for frame in &seq.frames {
        let result = match solve_frame(model, frame, weights, &init, opts) {
            Ok(r) => r,
            Err(Error::UnsolvableFrame(msg)) => IkResult {
                pose: init.clone(),
                residual: f64::NAN,
                initial_residual: f64::NAN,
                iterations: 0,
                converged: false,
                low_rank: true,
                marker_errors: Vec::new(),
                diagnostic: Some(msg),
            },
            Err(e) => return Err(e),
        };
        init = result.pose.clone();
        out.push(result);
    }
    Ok(out)
}

/// Joint angles of solved frames as an [`AngleSet`].
pub fn results_to_angle_set(model: &KinematicModel, results: &[IkResult], times: &[f64]) -> Result<AngleSet> {
    AngleSet::new(
        model.joint_names(),
        times.to_vec(),
        results.iter().map(|r| r.pose.angles.clone()).collect(),
    )
}

/// Wraps every angle of a pose into `[-180, 180)`.
pub fn wrap_pose(pose: &Pose) -> Pose {
    Pose {
        root_translation: pose.root_translation,
        angles: pose
            .angles
            .iter()
            .map(|e| EulerTriple {
                x: canonical_deg(e.x),
                y: canonical_deg(e.y),
                z: canonical_deg(e.z),
            })
            .collect(),
    }
}
