//! Procedural ground truth: sinusoidal joint motion, forward kinematics,
//! ring cameras, Gaussian heatmaps and virtual markers.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Target};
use crate::error::{Error, Result};
use crate::geomcam::{CameraProjection, FeatureMap};
use crate::io;
use crate::kinmodel::{KinematicModel, MarkerFrame, MarkerSequence, Pose};
use crate::rotmath::{AngleSet, EulerTriple};

/// Bundled two-joint arm used by small training fixtures.
pub const ARM_SKELETON_JSON: &str = include_str!("../assets/arm2.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub rate_hz: f64,
    /// Peak joint-angle amplitude (degrees); each DOF draws from [0.5, 1]×.
    pub amplitude_deg: f64,
    /// Base frequency (Hz); each DOF draws from [0.5, 1.5]×.
    pub frequency_hz: f64,
    pub root_amplitude_mm: f64,
    pub cameras: usize,
    pub ring_radius_mm: f64,
    pub camera_height_mm: f64,
    pub width: usize,
    pub height: usize,
    /// Heatmap Gaussian σ in full-resolution image pixels.
    pub heatmap_sigma_px: f64,
    /// Image pixels per heatmap pixel.
    pub stride: usize,
    pub marker_noise_mm: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration_s: 3.0,
            rate_hz: 100.0,
            amplitude_deg: 30.0,
            frequency_hz: 0.5,
            root_amplitude_mm: 100.0,
            cameras: 3,
            ring_radius_mm: 4000.0,
            camera_height_mm: 300.0,
            width: 1280,
            height: 720,
            heatmap_sigma_px: 48.0,
            stride: 32,
            marker_noise_mm: 0.0,
            seed: 0,
        }
    }
}

/// Middle Euler angles stay clear of gimbal lock.
const MAX_MIDDLE_DEG: f64 = 80.0;

impl SynthSpec {
    pub fn frames(&self) -> usize {
        (self.duration_s * self.rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if !(self.duration_s > 0.0) || self.frames() == 0 {
            return Err(Error::invalid("duration must give at least one frame"));
        }
        if self.cameras == 0 {
            return Err(Error::invalid("need at least one camera"));
        }
        if self.width == 0 || self.height == 0 || self.stride == 0 {
            return Err(Error::invalid("image size and stride must be positive"));
        }
        let nonneg = [
            self.heatmap_sigma_px,
            self.marker_noise_mm,
            self.amplitude_deg,
            self.frequency_hz,
            self.root_amplitude_mm,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("sigma, noise, amplitudes and frequency must be finite and >= 0"));
        }
        if !(self.ring_radius_mm > 0.0) {
            return Err(Error::invalid("ring radius must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.amp * (2.0 * PI * self.freq * t + self.phase).sin()
    }
}

fn draw_wave(rng: &mut ChaCha8Rng, amp: f64, freq: f64) -> Wave {
    Wave {
        amp: amp * rng.gen_range(0.5..=1.0),
        freq: freq * rng.gen_range(0.5..=1.5),
        phase: rng.gen_range(0.0..2.0 * PI),
    }
}

/// Ring of cameras looking at `target`, pinhole intrinsics with a 60°
/// horizontal field of view. Camera axes: x right, y down, z forward.
pub fn ring_cameras(spec: &SynthSpec, target: Vector3<f64>) -> Result<Vec<CameraProjection>> {
    let f = (spec.width as f64 / 2.0) / (30f64).to_radians().tan();
    let k = Matrix3::new(
        f,
        0.0,
        (spec.width as f64 - 1.0) / 2.0,
        0.0,
        f,
        (spec.height as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let up = Vector3::y();
    (0..spec.cameras)
        .map(|i| {
            let phi = 2.0 * PI * i as f64 / spec.cameras as f64;
            let c = Vector3::new(
                target.x + spec.ring_radius_mm * phi.cos(),
                spec.camera_height_mm,
                target.z + spec.ring_radius_mm * phi.sin(),
            );
            let z = (target - c).normalize();
            let y = -(up - z * up.dot(&z)).normalize();
            let x = y.cross(&z);
            let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
            let t = -(r * c);
            let mut rt = Matrix3x4::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            rt.set_column(3, &t);
            CameraProjection::new(format!("cam{i}"), k * rt, spec.width, spec.height)
        })
        .collect()
}

/// Unit-peak Gaussian heatmaps of `points` in the pixel grid of `cam`.
pub fn render_heatmaps(cam: &CameraProjection, points: &[Vector3<f64>], sigma: f64) -> FeatureMap {
    let mut map = FeatureMap::zeros(points.len(), cam.height, cam.width);
    for (c, p) in points.iter().enumerate() {
        let Some([u, v]) = cam.project(p) else { continue };
        if sigma == 0.0 {
            let (ru, rv) = (u.round(), v.round());
            if ru >= 0.0 && rv >= 0.0 && (ru as usize) < cam.width && (rv as usize) < cam.height {
                map.set(c, rv as usize, ru as usize, 1.0);
            }
            continue;
        }
        let k = -0.5 / (sigma * sigma);
        for y in 0..cam.height {
            let dy = y as f64 - v;
            for x in 0..cam.width {
                let dx = x as f64 - u;
                map.set(c, y, x, (k * (dx * dx + dy * dy)).exp());
            }
        }
    }
    map
}

/// Everything the generator produces, in memory.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub model: KinematicModel,
    pub poses: Vec<Pose>,
    pub angles: AngleSet,
    /// Markers as written (with noise when requested).
    pub markers: MarkerSequence,
    pub dataset: Dataset,
}

/// Joint-angle trajectories and root motion, deterministic in the seed.
pub fn sample_motion(model: &KinematicModel, spec: &SynthSpec) -> Result<(Vec<f64>, Vec<Pose>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut waves = Vec::new();
    for j in 0..model.joint_count() {
        let seg = model.joint_segment(j);
        let mut w = [None; 3];
        for &axis in &seg.dof {
            let comp = model.component_of(axis);
            let amp = if comp == 1 {
                spec.amplitude_deg.min(MAX_MIDDLE_DEG)
            } else {
                spec.amplitude_deg
            };
            w[comp] = Some(draw_wave(&mut rng, amp, spec.frequency_hz));
        }
        waves.push(w);
    }
    let root: Vec<Wave> = (0..3)
        .map(|_| draw_wave(&mut rng, spec.root_amplitude_mm, spec.frequency_hz))
        .collect();
    let times: Vec<f64> = (0..spec.frames()).map(|i| i as f64 / spec.rate_hz).collect();
    let poses = times
        .iter()
        .map(|&t| Pose {
            root_translation: Vector3::new(root[0].at(t), root[1].at(t), root[2].at(t)),
            angles: waves
                .iter()
                .map(|w| {
                    let a: [f64; 3] = std::array::from_fn(|k| w[k].map_or(0.0, |w| w.at(t)));
                    EulerTriple::new(a[0], a[1], a[2])
                })
                .collect(),
        })
        .collect();
    Ok((times, poses))
}

/// Generates motion, markers, cameras and heatmaps for `model`.
pub fn generate(model: &KinematicModel, spec: &SynthSpec) -> Result<SynthOutput> {
    let (times, poses) = sample_motion(model, spec)?;
    let rest = model.forward_kinematics(&Pose::rest(model))?;
    let kp = model.keypoints(&rest);
    let centroid = kp.iter().sum::<Vector3<f64>>() / kp.len().max(1) as f64;
    let cameras = ring_cameras(spec, centroid)?;
    let heat_cams: Vec<CameraProjection> =
        cameras.iter().map(|c| c.downsampled(spec.stride)).collect::<Result<_>>()?;
    let sigma = spec.heatmap_sigma_px / spec.stride as f64;
    let convention = model.convention();

    let per_frame: Vec<(Sample, MarkerFrame, bool)> = poses
        .par_iter()
        .zip(&times)
        .map(|(pose, &t)| {
            let fk = model.forward_kinematics(pose)?;
            let points = model.keypoints(&fk);
            let behind = points.iter().any(|p| cameras.iter().all(|c| c.project(p).is_none()));
            let heatmaps = heat_cams.iter().map(|c| render_heatmaps(c, &points, sigma)).collect();
            let frame = MarkerFrame {
                time: t,
                markers: model.markers().iter().zip(fk.markers).map(|(m, p)| (m.name.clone(), p)).collect(),
            };
            let sample = Sample {
                time: t,
                heatmaps,
                root: pose.root_translation,
                target: Target::from_euler(&pose.angles, convention),
            };
            Ok((sample, frame, behind))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(per_frame.len());
    let mut frames = Vec::with_capacity(per_frame.len());
    let mut flagged = Vec::new();
    for (i, (s, f, behind)) in per_frame.into_iter().enumerate() {
        samples.push(s);
        frames.push(f);
        if behind {
            flagged.push(i);
        }
    }
    if spec.marker_noise_mm > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65);
        let n = Normal::new(0.0, spec.marker_noise_mm).expect("validated sigma");
        for f in &mut frames {
            for p in f.markers.values_mut() {
                *p += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
            }
        }
    }
    let markers = MarkerSequence {
        names: model.marker_names(),
        frames,
    };
    let angles = AngleSet::new(
        model.joint_names(),
        times,
        poses.iter().map(|p| p.angles.clone()).collect(),
    )?;
    let dataset = Dataset {
        joints: model.joint_names(),
        convention,
        cameras,
        stride: spec.stride,
        samples,
        flagged,
    };
    Ok(SynthOutput {
        model: model.clone(),
        poses,
        angles,
        markers,
        dataset,
    })
}

impl SynthOutput {
    /// Dataset files plus `markers.csv`, `skeleton.json` and `synth.json`.
    pub fn write(&self, dir: &Path, spec: &SynthSpec) -> Result<()> {
        self.dataset.save(dir)?;
        io::write_marker_csv(&dir.join("markers.csv"), &self.markers)?;
        io::write_text(&dir.join("skeleton.json"), &self.model.to_json())?;
        let mut s = serde_json::to_string_pretty(spec).expect("spec serializes");
        s.push('\n');
        io::write_text(&dir.join("synth.json"), &s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            duration_s: 0.1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn cameras_see_the_subject() {
        let spec = SynthSpec::default();
        let cams = ring_cameras(&spec, Vector3::zeros()).unwrap();
        assert_eq!(cams.len(), 3);
        for c in &cams {
            let [u, v] = c.project(&Vector3::zeros()).unwrap();
            assert!((u - 639.5).abs() < 1e-6 && (v - 359.5).abs() < 1e-6 + 200.0);
            // World up maps to image up.
            let [_, v2] = c.project(&Vector3::new(0.0, 100.0, 0.0)).unwrap();
            assert!(v2 < v);
        }
    }

    #[test]
    fn heatmap_argmax_is_rounded_projection() {
        let spec = SynthSpec::default();
        let cam = ring_cameras(&spec, Vector3::zeros()).unwrap()[1].downsampled(32).unwrap();
        let p = Vector3::new(130.0, 420.0, -75.0);
        let map = render_heatmaps(&cam, &[p], 1.5);
        let [u, v] = cam.project(&p).unwrap();
        let (best, _) = map
            .channel(0)
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        assert_eq!((best % cam.width, best / cam.width), (u.round() as usize, v.round() as usize));
    }

    #[test]
    fn zero_amplitude_gives_constant_frames() {
        let spec = SynthSpec {
            amplitude_deg: 0.0,
            root_amplitude_mm: 0.0,
            ..small()
        };
        let out = generate(&KinematicModel::humanoid(), &spec).unwrap();
        let first = &out.markers.frames[0].markers;
        assert!(out.markers.frames.iter().all(|f| &f.markers == first));
        let h0 = &out.dataset.samples[0].heatmaps;
        assert!(out.dataset.samples.iter().all(|s| &s.heatmaps == h0));
    }

    #[test]
    fn targets_are_consistent_and_middle_angles_bounded() {
        let spec = SynthSpec {
            amplitude_deg: 120.0,
            ..small()
        };
        let out = generate(&KinematicModel::humanoid(), &spec).unwrap();
        for s in &out.dataset.samples {
            assert!(s.target.consistency_error().unwrap() < 1e-9);
            assert!(s.target.euler.iter().all(|e| e[1].abs() <= MAX_MIDDLE_DEG + 1e-9));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SynthSpec { rate_hz: 0.0, ..small() },
            SynthSpec { cameras: 0, ..small() },
            SynthSpec { heatmap_sigma_px: -1.0, ..small() },
        ] {
            assert!(generate(&KinematicModel::humanoid(), &bad).is_err());
        }
    }

    #[test]
    fn frames_behind_every_camera_are_flagged() {
        let spec = SynthSpec {
            ring_radius_mm: 100.0,
            root_amplitude_mm: 0.0,
            ..small()
        };
        let out = generate(&KinematicModel::humanoid(), &spec).unwrap();
        assert_eq!(out.dataset.flagged.len(), out.dataset.len());
        assert_eq!(generate(&KinematicModel::humanoid(), &small()).unwrap().dataset.flagged, Vec::<usize>::new());
    }
}
