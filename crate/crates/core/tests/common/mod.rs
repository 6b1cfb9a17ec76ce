//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use kinemetric::geomcam::ViewVolume;
use kinemetric::iksolve::IkWeights;
use kinemetric::kinmodel::{KinematicModel, MarkerFrame, Pose};
use kinemetric::nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use kinemetric::rotmath::{AngleSet, EulerTriple};
use kinemetric::synth::ARM_SKELETON_JSON;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Intrinsic XYZ built from nalgebra's axis-angle rotations.
pub fn euler_oracle(x: f64, y: f64, z: f64) -> Matrix3<f64> {
    let r = |axis: Unit<Vector3<f64>>, deg: f64| Rotation3::from_axis_angle(&axis, deg.to_radians()).into_inner();
    r(Vector3::x_axis(), x) * r(Vector3::y_axis(), y) * r(Vector3::z_axis(), z)
}

/// Uniform axis, angle in `[0, 180)` degrees.
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            break Unit::new_normalize(v);
        }
    };
    Rotation3::from_axis_angle(&axis, rng.gen_range(0.0..std::f64::consts::PI)).into_inner()
}

pub fn ortho_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).abs().max()
}

pub fn max_abs_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

/// Plain scalar loop: wrap every component difference into [-180, 180),
/// average the absolute values over all components and frames.
pub fn mpjae_oracle(a: &AngleSet, b: &AngleSet) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..a.frames.len() {
        for j in 0..a.joints.len() {
            let pa = [a.frames[f][j].x, a.frames[f][j].y, a.frames[f][j].z];
            let pb = [b.frames[f][j].x, b.frames[f][j].y, b.frames[f][j].z];
            for k in 0..3 {
                let mut d = pa[k] - pb[k];
                while d >= 180.0 {
                    d -= 360.0;
                }
                while d < -180.0 {
                    d += 360.0;
                }
                total += d.abs();
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn random_angle_set(rng: &mut impl Rng, joints: usize, frames: usize) -> AngleSet {
    AngleSet::new(
        (0..joints).map(|j| format!("j{j}")).collect(),
        (0..frames).map(|f| f as f64 * 0.01).collect(),
        (0..frames)
            .map(|_| {
                (0..joints)
                    .map(|_| {
                        EulerTriple::new(
                            rng.gen_range(-180.0..180.0),
                            rng.gen_range(-90.0..90.0),
                            rng.gen_range(-180.0..180.0),
                        )
                    })
                    .collect()
            })
            .collect(),
    )
    .unwrap()
}

/// Direct softmax per scalar location, no stabilization.
pub fn softmax_oracle(views: &[ViewVolume]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = views[0].values.len();
    let mut out = vec![0.0; n];
    let mut weights = vec![vec![0.0; n]; views.len()];
    for i in 0..n {
        let denom: f64 = views.iter().map(|v| v.values[i].exp()).sum();
        for (k, v) in views.iter().enumerate() {
            let w = v.values[i].exp() / denom;
            weights[k][i] = w;
            out[i] += w * v.values[i];
        }
    }
    (out, weights)
}

pub fn random_views(rng: &mut impl Rng, views: usize, side: usize, channels: usize) -> Vec<ViewVolume> {
    (0..views)
        .map(|_| {
            let vals = (0..side * side * side * channels).map(|_| rng.gen_range(-3.0..3.0)).collect();
            ViewVolume::from_values(side, channels, vals).unwrap()
        })
        .collect()
}

pub fn arm() -> KinematicModel {
    KinematicModel::from_json_str(ARM_SKELETON_JSON).unwrap()
}

/// Single hinge about z with two markers on the moving segment and one on
/// the fixed base.
pub const HINGE_JSON: &str = r#"{
  "joints_order": ["hinge"],
  "segments": [
    {"name": "base", "joint": "base", "parent": null, "offset_mm": [0, 0, 0], "dof": []},
    {"name": "link", "joint": "hinge", "parent": "base", "offset_mm": [0, 0, 0], "dof": ["z"], "tip_mm": [400, 0, 0]}
  ],
  "markers": [
    {"name": "B", "segment": "base", "offset_mm": [0, -50, 0]},
    {"name": "M1", "segment": "link", "offset_mm": [200, 0, 20]},
    {"name": "M2", "segment": "link", "offset_mm": [400, 30, 0]}
  ]
}"#;

/// Local marker offsets of the hinge fixture, written out by hand.
pub const HINGE_BASE: [f64; 3] = [0.0, -50.0, 0.0];
pub const HINGE_LINK: [[f64; 3]; 2] = [[200.0, 0.0, 20.0], [400.0, 30.0, 0.0]];

pub fn hinge_virtual(theta_deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let rot = |p: [f64; 3]| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    [HINGE_BASE, rot(HINGE_LINK[0]), rot(HINGE_LINK[1])]
}

/// Objective minimised over the root translation in closed form.
pub fn hinge_profile(theta_deg: f64, obs: &[[f64; 3]; 3], w: &[f64; 3]) -> f64 {
    let v = hinge_virtual(theta_deg);
    let wsum: f64 = w.iter().sum();
    let mut t = [0.0; 3];
    for i in 0..3 {
        for a in 0..3 {
            t[a] += w[i] * (obs[i][a] - v[i][a]) / wsum;
        }
    }
    (0..3)
        .map(|i| w[i] * (0..3).map(|a| (obs[i][a] - v[i][a] - t[a]).powi(2)).sum::<f64>())
        .sum()
}

/// Grid search at 0.01° followed by golden-section refinement.
pub fn hinge_brute_force(obs: &[[f64; 3]; 3], w: &[f64; 3]) -> f64 {
    let mut best = (0.0, f64::INFINITY);
    for k in 0..36000 {
        let th = -180.0 + k as f64 * 0.01;
        let f = hinge_profile(th, obs, w);
        if f < best.1 {
            best = (th, f);
        }
    }
    let (mut lo, mut hi) = (best.0 - 0.01, best.0 + 0.01);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if hinge_profile(a, obs, w) < hinge_profile(b, obs, w) {
            hi = b;
        } else {
            lo = a;
        }
    }
    (lo + hi) / 2.0
}

pub fn hinge_frame(obs: &[[f64; 3]; 3]) -> MarkerFrame {
    MarkerFrame {
        time: 0.0,
        markers: ["B", "M1", "M2"]
            .iter()
            .zip(obs)
            .map(|(n, p)| (n.to_string(), Vector3::from(*p)))
            .collect(),
    }
}

pub fn hinge_weights(w: &[f64; 3]) -> IkWeights {
    IkWeights::new(["B", "M1", "M2"].iter().map(|s| s.to_string()).zip(w.iter().copied()).collect()).unwrap()
}

/// Random pose exercising only the unlocked components of each joint.
pub fn random_pose(model: &KinematicModel, rng: &mut impl Rng) -> Pose {
    let mut pose = Pose::rest(model);
    pose.root_translation = Vector3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-100.0..100.0), rng.gen_range(-500.0..500.0));
    for (j, e) in pose.angles.iter_mut().enumerate() {
        let mut a = [0.0; 3];
        for ax in &model.joint_segment(j).dof {
            a[model.component_of(*ax)] = rng.gen_range(-60.0..60.0);
        }
        *e = EulerTriple::from_array(a);
    }
    pose
}

/// Hinge markers with an offset and σ = 8 mm noise.
pub fn noisy_hinge_obs(theta: f64, seed: u64) -> [[f64; 3]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 8.0).unwrap();
    let mut obs = hinge_virtual(theta);
    for p in obs.iter_mut() {
        for (a, v) in p.iter_mut().enumerate() {
            *v += [35.0, -12.0, 60.0][a] + n.sample(&mut rng);
        }
    }
    obs
}
