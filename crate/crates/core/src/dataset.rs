//! In-memory and on-disk synthetic datasets: per-frame multi-view heatmaps,
//! root positions, and joint-rotation targets in every representation.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomcam::{
    build_grid, unproject_views, AggregatedVolume, CameraProjection, FeatureMap, GridOrigin, HeatmapStack,
    RootMode, ViewVolume, VoxelGrid,
};
use crate::io::{self, Tensor};
use crate::rotmath::{
    euler_to_matrix_raw, matrix_to_quat, matrix_to_sixd, quat_to_matrix_raw, sixd_to_matrix, AngleSet,
    EulerConvention, EulerTriple, RotationMatrix, SixDRep,
};

/// Default cube edge (mm).
pub const DEFAULT_SIDE_MM: f64 = 2500.0;

/// Joint-rotation targets of one frame in all representations.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub euler: Vec<[f64; 3]>,
    pub quat: Vec<[f64; 4]>,
    pub sixd: Vec<[f64; 6]>,
    pub rotations: Vec<Matrix3<f64>>,
}

impl Target {
    pub fn from_euler(angles: &[EulerTriple], convention: EulerConvention) -> Self {
        let euler: Vec<[f64; 3]> = angles.iter().map(|e| e.as_array()).collect();
        let rotations: Vec<Matrix3<f64>> = euler.iter().map(|a| euler_to_matrix_raw(*a, convention)).collect();
        let quat = rotations
            .iter()
            .map(|r| matrix_to_quat(&RotationMatrix::from_matrix_unchecked(*r)).as_array())
            .collect();
        let sixd = rotations
            .iter()
            .map(|r| matrix_to_sixd(&RotationMatrix::from_matrix_unchecked(*r)).as_array())
            .collect();
        Target {
            euler,
            quat,
            sixd,
            rotations,
        }
    }

    pub fn joints(&self) -> usize {
        self.rotations.len()
    }

    /// Largest entrywise disagreement between the rotation implied by each
    /// representation.
    pub fn consistency_error(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for j in 0..self.joints() {
            let q = self.quat[j];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rq = quat_to_matrix_raw([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
            let r6 = *sixd_to_matrix(&SixDRep::from_array(self.sixd[j]))?.matrix();
            let re = self.rotations[j];
            worst = worst.max((rq - re).amax()).max((r6 - re).amax());
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    /// One `J × H × W` map per camera.
    pub heatmaps: Vec<FeatureMap>,
    /// World position of the root joint (mm).
    pub root: Vector3<f64>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub joints: Vec<String>,
    pub convention: EulerConvention,
    /// Full-resolution cameras.
    pub cameras: Vec<CameraProjection>,
    /// Heatmap pixels per image pixel along each axis is `1 / stride`.
    pub stride: usize,
    pub samples: Vec<Sample>,
    /// Frames where some joint projects behind every camera.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    joints: Vec<String>,
    euler_convention: String,
    frames: usize,
    views: usize,
    stride: usize,
    heatmap_height: usize,
    heatmap_width: usize,
    flagged_frames: Vec<usize>,
}

const FORMAT: &str = "kinemetric-dataset-1";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Cameras mapping into heatmap pixels.
    pub fn heatmap_cameras(&self) -> Result<Vec<CameraProjection>> {
        self.cameras.iter().map(|c| c.downsampled(self.stride)).collect()
    }

    pub fn grid(&self, i: usize, mode: RootMode, side: usize, side_mm: f64) -> Result<VoxelGrid> {
        build_grid(GridOrigin::for_mode(mode, self.samples[i].root), side_mm, side)
    }

    pub fn view_volumes(
        &self,
        cameras: &[CameraProjection],
        i: usize,
        mode: RootMode,
        side: usize,
        side_mm: f64,
    ) -> Result<Vec<ViewVolume>> {
        let grid = self.grid(i, mode, side, side_mm)?;
        let stack = HeatmapStack::new(cameras.to_vec(), self.samples[i].heatmaps.clone())?;
        unproject_views(&stack, &grid)
    }

    pub fn volume(&self, i: usize, mode: RootMode, side: usize, side_mm: f64) -> Result<AggregatedVolume> {
        let cams = self.heatmap_cameras()?;
        crate::geomcam::aggregate(&self.view_volumes(&cams, i, mode, side, side_mm)?)
    }

    pub fn angle_set(&self) -> Result<AngleSet> {
        AngleSet::new(
            self.joints.clone(),
            self.samples.iter().map(|s| s.time).collect(),
            self.samples
                .iter()
                .map(|s| s.target.euler.iter().map(|a| EulerTriple { x: a[0], y: a[1], z: a[2] }).collect())
                .collect(),
        )
    }

    /// Contiguous split: the last `round(fraction · n)` frames are held out.
    pub fn split(&self, val_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::invalid("validation fraction must be in [0, 1)"));
        }
        let n_val = (val_fraction * self.len() as f64).round() as usize;
        let cut = self.len() - n_val;
        Ok((self.subset(0..cut), self.subset(cut..self.len())))
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range.clone()].to_vec(),
            flagged: self
                .flagged
                .iter()
                .filter(|f| range.contains(f))
                .map(|f| f - range.start)
                .collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            joints: self.joints.clone(),
            convention: self.convention,
            cameras: self.cameras.clone(),
            stride: self.stride,
            samples: Vec::new(),
            flagged: Vec::new(),
        }
    }

    fn heatmap_shape(&self) -> (usize, usize) {
        self.samples
            .first()
            .and_then(|s| s.heatmaps.first())
            .map_or((0, 0), |m| (m.height, m.width))
    }

    /// Writes `dataset.json`, `calibration.json`, `angles.csv`, and the
    /// `heatmaps`, `roots` and `targets_*` tensors into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = self.len();
        let j = self.joint_count();
        let v = self.cameras.len();
        let (h, w) = self.heatmap_shape();
        let manifest = Manifest {
            format: FORMAT.into(),
            joints: self.joints.clone(),
            euler_convention: self.convention.tag(),
            frames: f,
            views: v,
            stride: self.stride,
            heatmap_height: h,
            heatmap_width: w,
            flagged_frames: self.flagged.clone(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        io::write_text(&dir.join("dataset.json"), &text)?;
        io::write_calibration(&dir.join("calibration.json"), &self.cameras)?;
        io::write_text(
            &dir.join("angles.csv"),
            &io::angle_csv_string(&self.angle_set()?, self.convention),
        )?;
        let names: Vec<String> = self.cameras.iter().map(|c| c.name.clone()).collect();
        let heat: Vec<f64> = self
            .samples
            .iter()
            .flat_map(|s| s.heatmaps.iter().flat_map(|m| m.values.iter().copied()))
            .collect();
        Tensor::new(vec![f, v, j, h, w], heat, names)?.write(&dir.join("heatmaps.bin"))?;
        let roots = self.samples.iter().flat_map(|s| s.root.iter().copied()).collect();
        Tensor::new(vec![f, 3], roots, vec![])?.write(&dir.join("roots.bin"))?;
        let flat = |get: &dyn Fn(&Target) -> Vec<f64>| -> Vec<f64> {
            self.samples.iter().flat_map(|s| get(&s.target)).collect()
        };
        Tensor::new(vec![f, j, 3], flat(&|t| t.euler.concat()), vec![])?.write(&dir.join("targets_euler.bin"))?;
        Tensor::new(vec![f, j, 4], flat(&|t| t.quat.concat()), vec![])?.write(&dir.join("targets_quat.bin"))?;
        Tensor::new(vec![f, j, 6], flat(&|t| t.sixd.concat()), vec![])?.write(&dir.join("targets_6d.bin"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let mpath = dir.join("dataset.json");
        let manifest: Manifest = serde_json::from_str(&io::read_text(&mpath)?)
            .map_err(|e| Error::parse(&mpath, e.line(), "dataset", e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(Error::parse(&mpath, 1, "format", format!("expected `{FORMAT}`")));
        }
        let convention: EulerConvention = manifest
            .euler_convention
            .parse()
            .map_err(|e: Error| Error::parse(&mpath, 1, "euler_convention", e.to_string()))?;
        let cameras = io::read_calibration(&dir.join("calibration.json"))?;
        let (f, v, j) = (manifest.frames, manifest.views, manifest.joints.len());
        let (h, w) = (manifest.heatmap_height, manifest.heatmap_width);
        if cameras.len() != v {
            return Err(Error::parse(&mpath, 1, "views", "calibration has a different camera count"));
        }
        let read = |name: &str, shape: Vec<usize>| -> Result<Tensor> {
            let path = dir.join(name);
            let t = Tensor::read(&path)?;
            if t.shape != shape {
                return Err(Error::parse(&path, 1, "shape", format!("expected {shape:?}, found {:?}", t.shape)));
            }
            Ok(t)
        };
        let heat = read("heatmaps.bin", vec![f, v, j, h, w])?;
        let roots = read("roots.bin", vec![f, 3])?;
        let euler = read("targets_euler.bin", vec![f, j, 3])?;
        let quat = read("targets_quat.bin", vec![f, j, 4])?;
        let sixd = read("targets_6d.bin", vec![f, j, 6])?;
        let angles = io::read_angle_csv(&dir.join("angles.csv"))?;
        if angles.len() != f || angles.joints != manifest.joints {
            return Err(Error::parse(dir.join("angles.csv"), 1, "time", "angle file does not match the manifest"));
        }
        let map_len = j * h * w;
        let mut samples = Vec::with_capacity(f);
        for i in 0..f {
            let heatmaps = (0..v)
                .map(|k| {
                    let start = (i * v + k) * map_len;
                    FeatureMap {
                        channels: j,
                        height: h,
                        width: w,
                        values: heat.values[start..start + map_len].to_vec(),
                    }
                })
                .collect();
            let e: Vec<[f64; 3]> = euler.values[i * j * 3..(i + 1) * j * 3]
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let target = Target {
                rotations: e.iter().map(|a| euler_to_matrix_raw(*a, convention)).collect(),
                euler: e,
                quat: quat.values[i * j * 4..(i + 1) * j * 4]
                    .chunks(4)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect(),
                sixd: sixd.values[i * j * 6..(i + 1) * j * 6]
                    .chunks(6)
                    .map(|c| std::array::from_fn(|k| c[k]))
                    .collect(),
            };
            let err = target
                .consistency_error()
                .map_err(|e| Error::parse(dir.join("targets_6d.bin"), 1, format!("frame {i}"), e.to_string()))?;
            if err > 1e-9 {
                return Err(Error::parse(
                    dir.join("targets_quat.bin"),
                    1,
                    format!("frame {i}"),
                    format!("targets disagree by {err:e}"),
                ));
            }
            samples.push(Sample {
                time: angles.times[i],
                heatmaps,
                root: Vector3::new(roots.values[3 * i], roots.values[3 * i + 1], roots.values[3 * i + 2]),
                target,
            });
        }
        Ok(Dataset {
            joints: manifest.joints,
            convention,
            cameras,
            stride: manifest.stride,
            samples,
            flagged: manifest.flagged_frames,
        })
    }
}
