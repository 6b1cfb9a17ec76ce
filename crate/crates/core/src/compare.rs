//! Joint angles recovered by inverse kinematics from 3D joint positions
//! versus angles regressed directly, reported per joint.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::iksolve::{results_to_angle_set, solve_sequence, IkOptions, IkWeights};
use crate::kinmodel::{KinematicModel, MarkerSequence, Pose};
use crate::learn::{predict, Checkpoint};
use crate::rotmath::{mpjae_report, AngleSet, EulerTriple};

/// Report columns after the method label.
pub const TABLE_COLUMNS: [&str; 9] = [
    "R Hip",
    "R Knee",
    "R Shoulder",
    "R Elbow",
    "L Hip",
    "L Knee",
    "L Shoulder",
    "L Elbow",
    "Avg",
];

/// Skeleton joint behind each of the first eight columns.
pub const TABLE_JOINTS: [&str; 8] = [
    "r_hip",
    "r_knee",
    "r_shoulder",
    "r_elbow",
    "l_hip",
    "l_knee",
    "l_shoulder",
    "l_elbow",
];

#[derive(Debug, Clone)]
pub struct CompareOptions {
    /// σ of the Gaussian noise added to joint positions for the noisy row.
    pub noise_mm: f64,
    pub seed: u64,
    pub ik: IkOptions,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            noise_mm: 18.0,
            seed: 0,
            ik: IkOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    /// One value per [`TABLE_COLUMNS`] entry.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<ReportRow>,
    pub truth: AngleSet,
    pub ik_markers: AngleSet,
    pub ik_clean: AngleSet,
    pub ik_noisy: AngleSet,
    pub direct: AngleSet,
}

impl CompareReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn table_csv(&self) -> String {
        let mut s = format!("method,{}\n", TABLE_COLUMNS.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| format!("{v:.3}")).collect();
            s.push_str(&format!("{},{}\n", r.method, vals.join(",")));
        }
        s
    }

    /// Long-format series for the table joints, one line per frame, joint
    /// and Euler component.
    pub fn trajectories_csv(&self) -> String {
        let mut s = String::from("time,joint,axis,truth,ik_clean,ik_noisy,direct\n");
        let idx: Vec<usize> = TABLE_JOINTS
            .iter()
            .filter_map(|n| self.truth.joints.iter().position(|j| j == n))
            .collect();
        for f in 0..self.truth.frames.len() {
            for &j in &idx {
                for (k, axis) in ["x", "y", "z"].iter().enumerate() {
                    let get = |a: &AngleSet| a.frames[f][j].as_array()[k];
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{}\n",
                        self.truth.times[f],
                        self.truth.joints[j],
                        axis,
                        get(&self.truth),
                        get(&self.ik_clean),
                        get(&self.ik_noisy),
                        get(&self.direct)
                    ));
                }
            }
        }
        s
    }
}

fn truth_poses(data: &Dataset) -> Vec<Pose> {
    data.samples
        .iter()
        .map(|s| Pose {
            root_translation: s.root,
            angles: s.target.euler.iter().map(|e| EulerTriple { x: e[0], y: e[1], z: e[2] }).collect(),
        })
        .collect()
}

fn markers_for(model: &KinematicModel, poses: &[Pose], times: &[f64]) -> Result<MarkerSequence> {
    Ok(MarkerSequence {
        names: model.marker_names(),
        frames: poses
            .iter()
            .zip(times)
            .map(|(p, &t)| model.marker_frame(p, t))
            .collect::<Result<_>>()?,
    })
}

fn table_row(method: &str, pred: &AngleSet, truth: &AngleSet) -> Result<ReportRow> {
    let rep = mpjae_report(pred, truth)?;
    let mut values: Vec<f64> = TABLE_JOINTS
        .iter()
        .map(|j| rep.joint(j).ok_or_else(|| Error::MissingData(format!("joint `{j}` is not in the dataset"))))
        .collect::<Result<_>>()?;
    values.push(values.iter().sum::<f64>() / values.len() as f64);
    Ok(ReportRow {
        method: method.into(),
        values,
    })
}

/// Runs inverse kinematics on the full marker set, on clean joint
/// positions and on noisy joint positions, and the checkpoint regressor on
/// the heatmaps, scoring each against the dataset's ground truth.
pub fn compare_ik_vs_direct(
    model: &KinematicModel,
    data: &Dataset,
    checkpoint: Option<&Checkpoint>,
    opts: &CompareOptions,
) -> Result<CompareReport> {
    let checkpoint =
        checkpoint.ok_or_else(|| Error::MissingData("the direct path needs a trained checkpoint".into()))?;
    if data.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if model.joint_names() != data.joints {
        return Err(Error::invalid("skeleton joints do not match the dataset"));
    }
    if !(opts.noise_mm >= 0.0 && opts.noise_mm.is_finite()) {
        return Err(Error::invalid("noise must be finite and >= 0"));
    }
    let truth = data.angle_set()?;
    let poses = truth_poses(data);
    let times = &truth.times;

    let full = markers_for(model, &poses, times)?;
    let ik_markers = results_to_angle_set(
        model,
        &solve_sequence(model, &full, &IkWeights::uniform(model), &opts.ik)?,
        times,
    )?;

    let jmodel = model.with_markers(model.joint_center_markers());
    let jweights = IkWeights::uniform(&jmodel);
    let clean = markers_for(&jmodel, &poses, times)?;
    let ik_clean = results_to_angle_set(&jmodel, &solve_sequence(&jmodel, &clean, &jweights, &opts.ik)?, times)?;

    let mut noisy = clean.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = Normal::new(0.0, opts.noise_mm).expect("validated sigma");
    for f in &mut noisy.frames {
        for p in f.markers.values_mut() {
            *p += Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
        }
    }
    let ik_noisy = results_to_angle_set(&jmodel, &solve_sequence(&jmodel, &noisy, &jweights, &opts.ik)?, times)?;

    let direct = predict(&checkpoint.network()?, data, &checkpoint.config)?;

    let rows = vec![
        table_row("IK markers", &ik_markers, &truth)?,
        table_row("IK joints", &ik_clean, &truth)?,
        table_row("IK joints noisy", &ik_noisy, &truth)?,
        table_row("Direct", &direct, &truth)?,
    ];
    Ok(CompareReport {
        rows,
        truth,
        ik_markers,
        ik_clean,
        ik_noisy,
        direct,
    })
}
