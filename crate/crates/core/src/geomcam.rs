//! Camera projection, voxel grids, bilinear sampling and softmax fusion of
//! per-view feature volumes.
//!
//! Volumes are stored row-major as `[x][y][z][channel]`; pixel coordinates
//! are `(u, v)` with `u` to the right, `v` down and the origin at the center
//! of the top-left pixel.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxels whose homogeneous depth is at or below this value are behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraProjection {
    pub name: String,
    /// World (mm) to homogeneous pixel coordinates.
    pub p: Matrix3x4<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraProjection {
    pub fn new(name: impl Into<String>, p: Matrix3x4<f64>, width: usize, height: usize) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection matrix has non-finite entries"));
        }
        let det = p.fixed_view::<3, 3>(0, 0).determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::invalid("projection matrix has a singular 3x3 block"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(CameraProjection {
            name: name.into(),
            p,
            width,
            height,
        })
    }

    /// Homogeneous image of a world point.
    pub fn homogeneous(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.p * Vector4::new(x.x, x.y, x.z, 1.0)
    }

    /// Pixel coordinates, or `None` when the point is behind the camera.
    pub fn project(&self, x: &Vector3<f64>) -> Option<[f64; 2]> {
        let h = self.homogeneous(x);
        (h.z > MIN_DEPTH).then(|| [h.x / h.z, h.y / h.z])
    }

    /// The same camera expressed in the pixel grid of a map downsampled by
    /// `stride` (pixel `i` of the map covers image pixels `[i·s, (i+1)·s)`).
    pub fn downsampled(&self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let s = stride as f64;
        let off = 0.5 / s - 0.5;
        let a = Matrix3::new(1.0 / s, 0.0, off, 0.0, 1.0 / s, off, 0.0, 0.0, 1.0);
        CameraProjection::new(
            self.name.clone(),
            a * self.p,
            self.width.div_ceil(stride),
            self.height.div_ceil(stride),
        )
    }
}

/// Whether the voxel cube follows the root joint or sits at the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootMode {
    Global,
    Local,
}

impl RootMode {
    pub fn name(self) -> &'static str {
        match self {
            RootMode::Global => "global",
            RootMode::Local => "local",
        }
    }
}

impl std::str::FromStr for RootMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RootMode::Global),
            "local" => Ok(RootMode::Local),
            other => Err(Error::invalid(format!("unknown root mode `{other}`"))),
        }
    }
}

/// Where to center the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridOrigin {
    /// Around the root joint's world position (mm).
    Global(Vector3<f64>),
    /// At `(0, 0, 0)`.
    Local,
}

impl GridOrigin {
    pub fn for_mode(mode: RootMode, root: Vector3<f64>) -> Self {
        match mode {
            RootMode::Global => GridOrigin::Global(root),
            RootMode::Local => GridOrigin::Local,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub side: usize,
    pub side_mm: f64,
    pub center: Vector3<f64>,
    /// Voxel centers (mm), `[x][y][z]` order.
    pub coords: Vec<Vector3<f64>>,
}

impl VoxelGrid {
    pub fn spacing(&self) -> f64 {
        self.side_mm / self.side as f64
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.side + iy) * self.side + iz
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let b = self.side;
        [idx / (b * b), (idx / b) % b, idx % b]
    }

    /// Grid index of the voxel containing `p`, if inside the cube.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let lo = self.center - Vector3::repeat(self.side_mm / 2.0);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - lo[a]) / self.spacing()).floor();
            if f < 0.0 || f >= self.side as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }
}

pub fn build_grid(origin: GridOrigin, side_mm: f64, side: usize) -> Result<VoxelGrid> {
    if side < 2 {
        return Err(Error::invalid(format!("grid needs B >= 2, got {side}")));
    }
    if !(side_mm > 0.0 && side_mm.is_finite()) {
        return Err(Error::invalid(format!("grid edge must be positive, got {side_mm}")));
    }
    let center = match origin {
        GridOrigin::Global(c) => c,
        GridOrigin::Local => Vector3::zeros(),
    };
    let spacing = side_mm / side as f64;
    let offset = |i: usize| -side_mm / 2.0 + spacing * (i as f64 + 0.5);
    let mut coords = Vec::with_capacity(side * side * side);
    for ix in 0..side {
        for iy in 0..side {
            for iz in 0..side {
                coords.push(center + Vector3::new(offset(ix), offset(iy), offset(iz)));
            }
        }
    }
    Ok(VoxelGrid {
        side,
        side_mm,
        center,
        coords,
    })
}

/// Pixel coordinates of every voxel center in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedVoxels {
    pub pixels: Vec<[f64; 2]>,
    pub in_front: Vec<bool>,
}

pub fn project_voxels(cam: &CameraProjection, grid: &VoxelGrid) -> Result<ProjectedVoxels> {
    let mut pixels = Vec::with_capacity(grid.len());
    let mut in_front = Vec::with_capacity(grid.len());
    for x in &grid.coords {
        match cam.project(x) {
            Some(px) => {
                pixels.push(px);
                in_front.push(true);
            }
            None => {
                pixels.push([f64::NAN, f64::NAN]);
                in_front.push(false);
            }
        }
    }
    if !in_front.iter().any(|&f| f) {
        return Err(Error::DegenerateView(format!(
            "every voxel is behind camera `{}`",
            cam.name
        )));
    }
    Ok(ProjectedVoxels { pixels, in_front })
}

/// A `channels × height × width` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            values: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, v: usize, u: usize) -> f64 {
        self.values[(c * self.height + v) * self.width + u]
    }

    pub fn set(&mut self, c: usize, v: usize, u: usize, value: f64) {
        self.values[(c * self.height + v) * self.width + u] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }
}

/// Four-neighbour bilinear interpolation of every channel at `(u, v)`.
/// Coordinates outside `[0, W−1] × [0, H−1]` (or non-finite) sample zero.
pub fn bilinear_sample(map: &FeatureMap, at: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; map.channels];
    bilinear_sample_into(map, at, &mut out);
    out
}

pub fn bilinear_sample_into(map: &FeatureMap, at: [f64; 2], out: &mut [f64]) {
    let [u, v] = at;
    let inside = u >= 0.0 && v >= 0.0 && u <= (map.width - 1) as f64 && v <= (map.height - 1) as f64;
    if !inside {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let x1 = (x0 + 1).min(map.width - 1);
    let y1 = (y0 + 1).min(map.height - 1);
    for (c, o) in out.iter_mut().enumerate() {
        let top = map.get(c, y0, x0) * (1.0 - fx) + map.get(c, y0, x1) * fx;
        let bottom = map.get(c, y1, x0) * (1.0 - fx) + map.get(c, y1, x1) * fx;
        *o = top * (1.0 - fy) + bottom * fy;
    }
}

/// Heatmaps of every view with the projection into each heatmap's pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub cameras: Vec<CameraProjection>,
    pub maps: Vec<FeatureMap>,
}

impl HeatmapStack {
    pub fn new(cameras: Vec<CameraProjection>, maps: Vec<FeatureMap>) -> Result<Self> {
        if cameras.len() != maps.len() {
            return Err(Error::shape(format!(
                "{} cameras for {} heatmaps",
                cameras.len(),
                maps.len()
            )));
        }
        if let Some(first) = maps.first() {
            for m in &maps {
                if (m.channels, m.height, m.width) != (first.channels, first.height, first.width) {
                    return Err(Error::shape("all views must share J, H and W"));
                }
            }
        }
        Ok(HeatmapStack { cameras, maps })
    }

    pub fn channels(&self) -> usize {
        self.maps.first().map_or(0, |m| m.channels)
    }
}

/// One view's feature volume, `B×B×B×J`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewVolume {
    pub side: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ViewVolume {
    pub fn zeros(side: usize, channels: usize) -> Self {
        ViewVolume {
            side,
            channels,
            values: vec![0.0; side * side * side * channels],
        }
    }

    pub fn from_values(side: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side * side * channels {
            return Err(Error::shape(format!(
                "{} values for a {side}³×{channels} volume",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("view volume has non-finite entries"));
        }
        Ok(ViewVolume {
            side,
            channels,
            values,
        })
    }
}

/// Softmax-fused volume together with the per-view weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedVolume {
    pub side: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    /// `[view][x][y][z][channel]`.
    pub weights: Vec<f64>,
}

impl AggregatedVolume {
    pub fn views(&self) -> usize {
        self.weights.len() / self.values.len().max(1)
    }

    pub fn weight(&self, view: usize, idx: usize) -> f64 {
        self.weights[view * self.values.len() + idx]
    }

    /// Voxel index with the largest value in `channel`.
    pub fn argmax(&self, channel: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (vox, chunk) in self.values.chunks(self.channels).enumerate() {
            if chunk[channel] > best.1 {
                best = (vox, chunk[channel]);
            }
        }
        best.0
    }
}

/// Per scalar location: `w_c = softmax_c(v_c)`, output `Σ_c w_c v_c`.
pub fn aggregate(views: &[ViewVolume]) -> Result<AggregatedVolume> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one view"))?;
    if views
        .iter()
        .any(|v| v.side != first.side || v.channels != first.channels || v.values.len() != first.values.len())
    {
        return Err(Error::invalid("view volumes differ in shape"));
    }
    let n = first.values.len();
    let c = views.len();
    let mut values = vec![0.0; n];
    let mut weights = vec![0.0; c * n];
    let mut sorted = vec![0.0; c];
    for i in 0..n {
        // Sums run over the sorted values so the result does not depend on
        // the order of the views.
        for (s, v) in sorted.iter_mut().zip(views) {
            *s = v.values[i];
        }
        sorted.sort_unstable_by(f64::total_cmp);
        let max = sorted[c - 1];
        let denom: f64 = sorted.iter().map(|v| (v - max).exp()).sum();
        values[i] = sorted.iter().map(|v| (v - max).exp() / denom * v).sum();
        for (k, v) in views.iter().enumerate() {
            weights[k * n + i] = (v.values[i] - max).exp() / denom;
        }
    }
    Ok(AggregatedVolume {
        side: first.side,
        channels: first.channels,
        values,
        weights,
    })
}

/// Gradient of a scalar with respect to every view given its gradient with
/// respect to the fused output: `∂/∂v_c = g · w_c · (1 + v_c − out)`.
pub fn aggregate_backward(
    views: &[ViewVolume],
    fused: &AggregatedVolume,
    grad_out: &[f64],
) -> Vec<Vec<f64>> {
    let n = fused.values.len();
    views
        .iter()
        .enumerate()
        .map(|(k, v)| {
            (0..n)
                .map(|i| {
                    let w = fused.weights[k * n + i];
                    grad_out[i] * w * (1.0 + v.values[i] - fused.values[i])
                })
                .collect()
        })
        .collect()
}

/// Samples every view's heatmaps at the projected voxel centers. Voxels
/// behind a camera get zero in that view.
pub fn unproject_views(heatmaps: &HeatmapStack, grid: &VoxelGrid) -> Result<Vec<ViewVolume>> {
    if heatmaps.maps.is_empty() {
        return Err(Error::invalid("no views to unproject"));
    }
    let channels = heatmaps.channels();
    heatmaps
        .cameras
        .iter()
        .zip(&heatmaps.maps)
        .map(|(cam, map)| {
            let proj = project_voxels(cam, grid)?;
            let mut vol = ViewVolume::zeros(grid.side, channels);
            for (i, (px, front)) in proj.pixels.iter().zip(&proj.in_front).enumerate() {
                if *front {
                    bilinear_sample_into(map, *px, &mut vol.values[i * channels..(i + 1) * channels]);
                }
            }
            Ok(vol)
        })
        .collect()
}

pub fn unproject(heatmaps: &HeatmapStack, grid: &VoxelGrid) -> Result<AggregatedVolume> {
    aggregate(&unproject_views(heatmaps, grid)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_camera() -> CameraProjection {
        CameraProjection::new("id", Matrix3x4::identity(), 100, 100).unwrap()
    }

    #[test]
    fn grid_local_b2() {
        let g = build_grid(GridOrigin::Local, 2500.0, 2).unwrap();
        assert_eq!(g.len(), 8);
        for c in &g.coords {
            for a in 0..3 {
                assert_eq!(c[a].abs(), 625.0);
            }
        }
        assert_eq!(g.coords[0], Vector3::new(-625.0, -625.0, -625.0));
        assert_eq!(g.coords[g.index(1, 0, 1)], Vector3::new(625.0, -625.0, 625.0));
    }

    #[test]
    fn grid_global_is_translated_local() {
        let l = build_grid(GridOrigin::Local, 2500.0, 4).unwrap();
        let g = build_grid(GridOrigin::Global(Vector3::new(100.0, 0.0, 0.0)), 2500.0, 4).unwrap();
        for (a, b) in l.coords.iter().zip(&g.coords) {
            assert_eq!(b - a, Vector3::new(100.0, 0.0, 0.0));
        }
    }

    #[test]
    fn grid_b16_spacing() {
        let g = build_grid(GridOrigin::Local, 2500.0, 16).unwrap();
        assert_eq!(g.len(), 4096);
        assert_eq!(g.spacing(), 156.25);
        assert_eq!(g.coords[1].z - g.coords[0].z, 156.25);
        assert_eq!(g.coords[0].x, -(1250.0 - 78.125));
        assert_eq!(g.coords[4095].x, 1250.0 - 78.125);
        assert_eq!(g.voxel_of(&g.coords[g.index(3, 7, 11)]), Some([3, 7, 11]));
    }

    #[test]
    fn grid_rejects_bad_args() {
        assert!(build_grid(GridOrigin::Local, 2500.0, 1).is_err());
        assert!(build_grid(GridOrigin::Local, 0.0, 4).is_err());
        assert!(build_grid(GridOrigin::Local, -1.0, 4).is_err());
    }

    #[test]
    fn identity_projection() {
        let cam = identity_camera();
        assert_eq!(cam.project(&Vector3::new(500.0, -250.0, 1000.0)), Some([0.5, -0.25]));
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, 1000.0)), Some([0.0, 0.0]));
        assert_eq!(cam.project(&Vector3::new(0.0, 0.0, -5.0)), None);
    }

    #[test]
    fn all_behind_is_degenerate() {
        let cam = identity_camera();
        let g = build_grid(GridOrigin::Global(Vector3::new(0.0, 0.0, -5000.0)), 1000.0, 4).unwrap();
        assert!(matches!(project_voxels(&cam, &g), Err(Error::DegenerateView(_))));
    }

    #[test]
    fn singular_camera_rejected() {
        let mut p = Matrix3x4::identity();
        p[(2, 2)] = 0.0;
        assert!(CameraProjection::new("bad", p, 10, 10).is_err());
    }

    #[test]
    fn downsampled_camera_maps_pixel_centers() {
        let cam = identity_camera();
        let d = cam.downsampled(4).unwrap();
        assert_eq!((d.width, d.height), (25, 25));
        // image pixels 0..=3 form heatmap pixel 0, whose center is image 1.5
        let p = d.project(&Vector3::new(1.5, 5.5, 1.0)).unwrap();
        assert!((p[0] - 0.0).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_cases() {
        let mut m = FeatureMap::zeros(2, 2, 2);
        m.set(0, 0, 0, 0.0);
        m.set(0, 0, 1, 2.0);
        m.set(0, 1, 0, 4.0);
        m.set(0, 1, 1, 6.0);
        m.set(1, 1, 1, 1.0);
        assert_eq!(bilinear_sample(&m, [0.5, 0.5])[0], 3.0);
        assert_eq!(bilinear_sample(&m, [1.0, 0.0]), vec![2.0, 0.0]);
        assert_eq!(bilinear_sample(&m, [1.0, 1.0]), vec![6.0, 1.0]);
        assert_eq!(bilinear_sample(&m, [-5.0, -5.0]), vec![0.0, 0.0]);
        assert_eq!(bilinear_sample(&m, [1.0001, 0.5]), vec![0.0, 0.0]);
        assert_eq!(bilinear_sample(&m, [f64::NAN, 0.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_single_and_identical() {
        let v = ViewVolume::from_values(2, 1, vec![0.1, -3.0, 2.0, 7.5, 0.0, 1.0, 4.0, -1.0]).unwrap();
        let a = aggregate(std::slice::from_ref(&v)).unwrap();
        assert_eq!(a.values, v.values);
        assert!(a.weights.iter().all(|&w| w == 1.0));

        let a = aggregate(&[v.clone(), v.clone()]).unwrap();
        for (x, y) in a.values.iter().zip(&v.values) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(a.weights.iter().all(|&w| w == 0.5));
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[]), Err(Error::InvalidArgument(_))));
        let a = ViewVolume::zeros(2, 1);
        let b = ViewVolume::zeros(2, 2);
        assert!(matches!(aggregate(&[a, b]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn aggregate_survives_large_values() {
        let a = ViewVolume::from_values(2, 1, vec![1000.0; 8]).unwrap();
        let b = ViewVolume::from_values(2, 1, vec![990.0; 8]).unwrap();
        let f = aggregate(&[a, b]).unwrap();
        assert!(f.values.iter().all(|v| v.is_finite() && *v > 999.0 && *v <= 1000.0));
    }

    #[test]
    fn unproject_constant_heatmap() {
        let k = 0.37;
        let cam = CameraProjection::new(
            "c",
            Matrix3x4::new(
                100.0, 0.0, 50.0, 0.0, //
                0.0, 100.0, 50.0, 0.0, //
                0.0, 0.0, 1.0, 0.0,
            ),
            101,
            101,
        )
        .unwrap();
        let mut map = FeatureMap::zeros(1, 101, 101);
        map.values.iter_mut().for_each(|v| *v = k);
        let stack = HeatmapStack::new(vec![cam], vec![map]).unwrap();
        let grid = build_grid(GridOrigin::Global(Vector3::new(0.0, 0.0, 3000.0)), 1000.0, 4).unwrap();
        let vol = unproject(&stack, &grid).unwrap();
        assert!(vol.values.iter().all(|&v| (v - k).abs() < 1e-15));
    }
}
