//! Voxel lattice domain types and coordinate arithmetic.
//!
//! Axis convention: X forward, Y left, Z up in the ego frame; grid axes are
//! aligned with the ego axes. Binning is lower-inclusive, upper-exclusive:
//! points exactly on a max face are outside the grid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The voxel lattice: metric extents, base resolution, class taxonomy and
/// pyramid depth. Class id 0 is reserved for empty space.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T> {
    pub x_min: T,
    pub x_max: T,
    pub y_min: T,
    pub y_max: T,
    pub z_min: T,
    pub z_max: T,
    pub voxel_size: T,
    pub num_classes: usize,
    pub num_levels: usize,
    pub class_names: Vec<String>,
}

impl<T: Scalar> GridSpec<T> {
    pub fn new(
        extents: [f64; 6],
        voxel_size: f64,
        num_levels: usize,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let spec = GridSpec {
            x_min: T::of_f64(extents[0]),
            x_max: T::of_f64(extents[1]),
            y_min: T::of_f64(extents[2]),
            y_max: T::of_f64(extents[3]),
            z_min: T::of_f64(extents[4]),
            z_max: T::of_f64(extents[5]),
            voxel_size: T::of_f64(voxel_size),
            num_classes: class_names.len(),
            num_levels,
            class_names,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale default: 40x40x8 voxels at 0.5 m, four pyramid levels,
    /// eight classes (empty, ground plus six object classes).
    pub fn desk() -> Self {
        GridSpec::new(
            [-10.0, 10.0, -10.0, 10.0, -2.0, 2.0],
            0.5,
            4,
            desk_class_names(),
        )
        .expect("desk preset is valid")
    }

    /// Full-scale extents used by the SurroundOcc-style benchmarks:
    /// 200x200x16 voxels at 0.5 m, 18 classes. Kept as a named preset; the
    /// test default is [`GridSpec::desk`].
    pub fn full_scale() -> Self {
        GridSpec::new(
            [-50.0, 50.0, -50.0, 50.0, -5.0, 3.0],
            0.5,
            4,
            full_scale_class_names(),
        )
        .expect("full-scale preset is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_size <= T::zero() {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if self.num_levels < 1 {
            return Err(Error::Config("num_levels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(
                "num_classes must be >= 2 (class 0 is reserved for empty)".into(),
            ));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config("class_names length != num_classes".into()));
        }
        let divisor = 1usize << (self.num_levels - 1);
        for (lo, hi, name) in [
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
            (self.z_min, self.z_max, "z"),
        ] {
            let cells = exact_cell_count(lo, hi, self.voxel_size).ok_or_else(|| {
                Error::Config(format!(
                    "{name} extent is not a positive integer number of voxels"
                ))
            })?;
            if cells % divisor != 0 {
                return Err(Error::Config(format!(
                    "{name} cell count {cells} is not divisible by 2^(L-1) = {divisor}"
                )));
            }
        }
        Ok(())
    }

    /// Grid shape (X, Y, Z) at the given level; each level halves every axis.
    pub fn shape(&self, level: usize) -> Result<[usize; 3]> {
        if level >= self.num_levels {
            return Err(Error::InvalidArgument(format!(
                "level {level} out of range [0, {})",
                self.num_levels
            )));
        }
        let base = self.base_shape();
        let d = 1usize << level;
        Ok([base[0] / d, base[1] / d, base[2] / d])
    }

    pub fn base_shape(&self) -> [usize; 3] {
        [
            exact_cell_count(self.x_min, self.x_max, self.voxel_size).unwrap(),
            exact_cell_count(self.y_min, self.y_max, self.voxel_size).unwrap(),
            exact_cell_count(self.z_min, self.z_max, self.voxel_size).unwrap(),
        ]
    }

    pub fn cell_size(&self, level: usize) -> T {
        self.voxel_size * T::of_usize(1usize << level)
    }

    pub fn origin(&self) -> [T; 3] {
        [self.x_min, self.y_min, self.z_min]
    }
}

fn exact_cell_count<T: Scalar>(lo: T, hi: T, cell: T) -> Option<usize> {
    let span = (hi - lo).as_f64();
    let cell = cell.as_f64();
    if span <= 0.0 {
        return None;
    }
    let n = span / cell;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > 1e-9 * rounded.max(1.0) {
        return None;
    }
    Some(rounded as usize)
}

pub fn desk_class_names() -> Vec<String> {
    ["empty", "ground", "car", "truck", "pedestrian", "cyclist", "barrier", "vegetation"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn full_scale_class_names() -> Vec<String> {
    [
        "empty",
        "others",
        "barrier",
        "bicycle",
        "bus",
        "car",
        "construction_vehicle",
        "motorcycle",
        "pedestrian",
        "traffic_cone",
        "trailer",
        "truck",
        "driveable_surface",
        "other_flat",
        "sidewalk",
        "terrain",
        "manmade",
        "vegetation",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Cell index of a point at the given level, or `None` when the point lies
/// outside the extents (including exactly on a max face).
pub fn voxel_index<T: Scalar>(
    point: [T; 3],
    spec: &GridSpec<T>,
    level: usize,
) -> Result<Option<[usize; 3]>> {
    let shape = spec.shape(level)?;
    let cell = spec.cell_size(level);
    let origin = spec.origin();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let rel = (point[a] - origin[a]) / cell;
        if rel < T::zero() {
            return Ok(None);
        }
        let i = rel.as_f64().floor() as usize;
        if i >= shape[a] {
            return Ok(None);
        }
        idx[a] = i;
    }
    Ok(Some(idx))
}

/// Geometric center of a cell; round-trips with [`voxel_index`].
pub fn voxel_center<T: Scalar>(
    index: [usize; 3],
    spec: &GridSpec<T>,
    level: usize,
) -> Result<[T; 3]> {
    let shape = spec.shape(level)?;
    for a in 0..3 {
        if index[a] >= shape[a] {
            return Err(Error::InvalidArgument(format!(
                "index {:?} out of range {:?} at level {level}",
                index, shape
            )));
        }
    }
    let cell = spec.cell_size(level);
    let origin = spec.origin();
    let half = T::of_f64(0.5);
    Ok([
        origin[0] + cell * (T::of_usize(index[0]) + half),
        origin[1] + cell * (T::of_usize(index[1]) + half),
        origin[2] + cell * (T::of_usize(index[2]) + half),
    ])
}

/// Dense semantic label volume at level-0 resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
}

impl OccupancyGrid {
    pub fn empty(dims: [usize; 3]) -> Self {
        OccupancyGrid {
            dims,
            labels: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.labels[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, label: u16) {
        self.labels[(i * self.dims[1] + j) * self.dims[2] + k] = label;
    }

    pub fn validate<T: Scalar>(&self, spec: &GridSpec<T>) -> Result<()> {
        if self.dims != spec.base_shape() {
            return Err(Error::InvalidArgument(format!(
                "grid dims {:?} do not match spec base shape {:?}",
                self.dims,
                spec.base_shape()
            )));
        }
        let nc = spec.num_classes as u16;
        if let Some(bad) = self.labels.iter().find(|&&l| l >= nc) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range [0, {nc})"
            )));
        }
        Ok(())
    }
}

/// One lidar return: position plus reflectance in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub reflectance: T,
}

/// One radar return: position plus planar velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPoint<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub vx: T,
    pub vy: T,
}

/// Pinhole camera: intrinsics, rigid ego-to-camera transform, image size.
/// Camera frame: +Z optical axis, +X right, +Y down.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel<T> {
    pub intrinsics: [[T; 3]; 3],
    pub extrinsics: [[T; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> CameraModel<T> {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsics[0][0] <= T::zero() || self.intrinsics[1][1] <= T::zero() {
            return Err(Error::Config("camera focal lengths must be positive".into()));
        }
        // Rotation block must be orthonormal within 1e-6.
        let r = &self.extrinsics;
        let tol = 1e-6;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += r[i][k].as_f64() * r[j][k].as_f64();
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > tol {
                    return Err(Error::Config(
                        "camera extrinsics rotation block is not orthonormal".into(),
                    ));
                }
            }
        }
        let bottom = [T::zero(), T::zero(), T::zero(), T::one()];
        for j in 0..4 {
            if (self.extrinsics[3][j] - bottom[j]).abs().as_f64() > tol {
                return Err(Error::Config(
                    "camera extrinsics bottom row must be [0,0,0,1]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Ego-frame point to camera frame.
    pub fn to_camera(&self, p: [T; 3]) -> [T; 3] {
        let e = &self.extrinsics;
        let mut out = [T::zero(); 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    /// Project an ego-frame point to pixel coordinates; `None` behind camera.
    pub fn project(&self, p: [T; 3]) -> Option<[T; 2]> {
        let cam = self.to_camera(p);
        if cam[2] <= T::zero() {
            return None;
        }
        let k = &self.intrinsics;
        let u = k[0][0] * cam[0] / cam[2] + k[0][2];
        let v = k[1][1] * cam[1] / cam[2] + k[1][2];
        Some([u, v])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_shapes() {
        let spec = GridSpec::<f64>::desk();
        assert_eq!(spec.base_shape(), [40, 40, 8]);
        assert_eq!(spec.shape(3).unwrap(), [5, 5, 1]);
        assert!(spec.shape(4).is_err());
    }

    #[test]
    fn full_scale_preset_is_valid() {
        let spec = GridSpec::<f32>::full_scale();
        assert_eq!(spec.base_shape(), [200, 200, 16]);
        assert_eq!(spec.num_classes, 18);
    }

    #[test]
    fn lower_corner_binning() {
        let spec = GridSpec::<f64>::desk();
        let idx = voxel_index([spec.x_min, spec.y_min, spec.z_min], &spec, 0).unwrap();
        assert_eq!(idx, Some([0, 0, 0]));
    }

    #[test]
    fn upper_face_is_outside() {
        let spec = GridSpec::<f64>::desk();
        let idx = voxel_index([spec.x_max, 0.0, 0.0], &spec, 0).unwrap();
        assert_eq!(idx, None);
    }

    #[test]
    fn invalid_level_is_an_error() {
        let spec = GridSpec::<f64>::desk();
        assert!(voxel_index([0.0, 0.0, 0.0], &spec, 4).is_err());
        assert!(voxel_center([0, 0, 0], &spec, 7).is_err());
    }

    #[test]
    fn center_of_origin_cell() {
        let spec = GridSpec::<f64>::desk();
        let c = voxel_center([0, 0, 0], &spec, 0).unwrap();
        let v = 0.5;
        assert_eq!(c, [spec.x_min + v / 2.0, spec.y_min + v / 2.0, spec.z_min + v / 2.0]);
    }

    #[test]
    fn out_of_range_center_is_an_error() {
        let spec = GridSpec::<f64>::desk();
        assert!(voxel_center([40, 0, 0], &spec, 0).is_err());
    }

    #[test]
    fn level1_center_is_mean_of_children() {
        let spec = GridSpec::<f64>::desk();
        let parent = voxel_center([3, 2, 1], &spec, 1).unwrap();
        let mut mean = [0.0; 3];
        for di in 0..2 {
            for dj in 0..2 {
                for dk in 0..2 {
                    let c = voxel_center([6 + di, 4 + dj, 2 + dk], &spec, 0).unwrap();
                    for a in 0..3 {
                        mean[a] += c[a] / 8.0;
                    }
                }
            }
        }
        for a in 0..3 {
            assert!((parent[a] - mean[a]).abs() < 1e-12);
        }
    }
}
