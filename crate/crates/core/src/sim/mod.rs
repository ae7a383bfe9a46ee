//! Deterministic synthetic scenes and sensor data with exact ground truth.
//!
//! Every generator is a pure function of (seed, config): the same pair
//! yields a bit-identical [`SensorFrame`]. Independent ChaCha streams keep
//! the sensors decoupled, so e.g. the night scenario perturbs images while
//! leaving lidar and radar byte-for-byte unchanged.

pub mod geom;
mod camera;
mod frame;
mod gt;
mod lidar;
mod radar;
mod render;
mod scene;

pub use camera::build_camera_ring;
pub use frame::generate_frame;
pub use gt::{rasterize_ground_truth, visibility_mask};
pub use lidar::simulate_lidar;
pub use radar::simulate_radar;
pub use render::render_cameras;
pub use scene::generate_scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{CameraModel, GridSpec, LidarPoint, OccupancyGrid, RadarPoint};
use crate::scalar::Scalar;

/// Weather / illumination tag, one per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Day,
    Night,
    Rain,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Day => "day",
            Scenario::Night => "night",
            Scenario::Rain => "rain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "day" => Some(Scenario::Day),
            "night" => Some(Scenario::Night),
            "rain" => Some(Scenario::Rain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShapeKind<T> {
    Box { length: T, width: T },
    Cylinder { radius: T },
}

/// One placed scene object: a ground-anchored box or cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject<T> {
    pub kind: ShapeKind<T>,
    pub center_xy: [T; 2],
    pub yaw: T,
    pub height: T,
    pub class_id: u16,
    pub velocity: [T; 2],
    pub reflectance: T,
}

/// A generated scene: objects plus the infinite ground plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    pub objects: Vec<SceneObject<T>>,
    pub ground_height: T,
    pub ground_reflectance: T,
    pub ground_class: u16,
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRaster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

/// One synchronized multi-sensor sample with exact ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame<T> {
    pub images: Vec<ImageRaster>,
    pub cameras: Vec<CameraModel<T>>,
    pub lidar_points: Vec<LidarPoint<T>>,
    pub radar_points: Vec<RadarPoint<T>>,
    pub gt: OccupancyGrid,
    pub visibility_mask: Option<Vec<bool>>,
    pub scenario: Scenario,
    pub seed: u64,
}

/// Spawnable object class: geometry, motion and appearance ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectClassDef {
    pub class_id: u16,
    pub name: String,
    pub cylinder: bool,
    /// Box: (length, width); cylinder: (diameter, diameter).
    pub len_range: [f64; 2],
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub speed_range: [f64; 2],
    pub reflectance_range: [f64; 2],
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRigConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub pitch_deg: f64,
    pub mount_radius: f64,
    pub mount_z: f64,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        CameraRigConfig {
            count: 6,
            width: 64,
            height: 64,
            hfov_deg: 80.0,
            pitch_deg: 10.0,
            mount_radius: 0.8,
            mount_z: 0.4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    pub azimuth_steps: usize,
    pub elevation_steps: usize,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
    pub mount_z: f64,
    /// Per-return dropout probability in the rain scenario.
    pub rain_drop_prob: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            azimuth_steps: 60,
            elevation_steps: 16,
            elev_min_deg: -35.0,
            elev_max_deg: 5.0,
            mount_z: 0.4,
            rain_drop_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    pub points_min: usize,
    pub points_max: usize,
    pub jitter_std: f64,
    pub jitter_clamp: f64,
    pub aim_jitter_deg: f64,
    pub mount_z: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        RadarConfig {
            points_min: 1,
            points_max: 4,
            jitter_std: 0.12,
            jitter_clamp: 0.2,
            aim_jitter_deg: 6.0,
            mount_z: 0.0,
        }
    }
}

/// Scenario probabilities used when a frame's tag is not forced.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioMix {
    pub day: f64,
    pub rain: f64,
    pub night: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix {
            day: 0.5,
            rain: 0.25,
            night: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_objects_min: usize,
    pub num_objects_max: usize,
    /// Objects spawn with footprint circumcenter at least this far out.
    pub spawn_radius_min: f64,
    pub spawn_radius_max: f64,
    /// Required clearance between footprint circumcircles.
    pub separation_margin: f64,
    pub max_place_attempts: usize,
    pub ground_height: f64,
    pub ground_reflectance: f64,
    pub ground_class: u16,
    pub classes: Vec<ObjectClassDef>,
    pub cameras: CameraRigConfig,
    pub lidar: LidarConfig,
    pub radar: RadarConfig,
    pub scenario_mix: ScenarioMix,
    /// Night: pixel = factor * (base + noise).
    pub night_factor: f64,
    pub night_noise_std: f64,
    /// Rain: 3x3 box blur on images when set.
    pub rain_blur: bool,
    pub ground_color: [f64; 3],
    pub sky_color: [f64; 3],
    pub emit_visibility_mask: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_objects_min: 4,
            num_objects_max: 8,
            spawn_radius_min: 2.5,
            spawn_radius_max: 9.0,
            separation_margin: 0.25,
            max_place_attempts: 200,
            ground_height: -1.4,
            ground_reflectance: 0.15,
            ground_class: 1,
            classes: desk_object_classes(),
            cameras: CameraRigConfig::default(),
            lidar: LidarConfig::default(),
            radar: RadarConfig::default(),
            scenario_mix: ScenarioMix::default(),
            night_factor: 0.08,
            night_noise_std: 0.35,
            rain_blur: true,
            ground_color: [0.35, 0.32, 0.28],
            sky_color: [0.70, 0.85, 1.00],
            emit_visibility_mask: true,
        }
    }
}

/// Attribute table for the desk taxonomy (class ids 2..=7).
///
/// All lateral dimensions stay above 0.6 m so every object column contains
/// at least one voxel center of the 0.5 m grid; the surface-consistency
/// property depends on that.
pub fn desk_object_classes() -> Vec<ObjectClassDef> {
    vec![
        ObjectClassDef {
            class_id: 2,
            name: "car".into(),
            cylinder: false,
            len_range: [3.6, 4.6],
            width_range: [1.7, 2.0],
            height_range: [1.4, 1.7],
            speed_range: [3.0, 8.0],
            reflectance_range: [0.75, 0.90],
            color: [0.20, 0.40, 0.90],
        },
        ObjectClassDef {
            class_id: 3,
            name: "truck".into(),
            cylinder: false,
            len_range: [5.5, 7.0],
            width_range: [2.2, 2.6],
            height_range: [2.4, 3.0],
            speed_range: [2.0, 6.0],
            reflectance_range: [0.60, 0.75],
            color: [0.20, 0.80, 0.30],
        },
        ObjectClassDef {
            class_id: 4,
            name: "pedestrian".into(),
            cylinder: true,
            len_range: [0.70, 0.90],
            width_range: [0.70, 0.90],
            height_range: [1.6, 1.8],
            speed_range: [0.3, 1.2],
            reflectance_range: [0.30, 0.40],
            color: [0.90, 0.30, 0.20],
        },
        ObjectClassDef {
            class_id: 5,
            name: "cyclist".into(),
            cylinder: true,
            len_range: [0.70, 1.00],
            width_range: [0.70, 1.00],
            height_range: [1.6, 1.8],
            speed_range: [1.0, 3.0],
            reflectance_range: [0.40, 0.50],
            color: [0.90, 0.80, 0.20],
        },
        ObjectClassDef {
            class_id: 6,
            name: "barrier".into(),
            cylinder: false,
            len_range: [2.0, 3.0],
            width_range: [0.7, 0.9],
            height_range: [0.9, 1.2],
            speed_range: [0.0, 0.0],
            reflectance_range: [0.50, 0.60],
            color: [0.60, 0.60, 0.65],
        },
        ObjectClassDef {
            class_id: 7,
            name: "vegetation".into(),
            cylinder: true,
            len_range: [1.6, 2.8],
            width_range: [1.6, 2.8],
            height_range: [1.5, 2.5],
            speed_range: [0.0, 0.0],
            reflectance_range: [0.20, 0.30],
            color: [0.10, 0.55, 0.15],
        },
    ]
}

/// Independent RNG streams per subsystem.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Scene = 0,
    Lidar = 1,
    Radar = 2,
    Image = 3,
    Scenario = 4,
}

/// Seeded, stream-separated RNG (splitmix-style mixing of seed and stream).
pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut z = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(0xBF58476D1CE4E5B9u64.wrapping_mul(stream as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Validate frame-level invariants against a grid spec.
pub fn validate_frame<T: Scalar>(frame: &SensorFrame<T>, spec: &GridSpec<T>) -> crate::Result<()> {
    if frame.cameras.is_empty() {
        return Err(crate::Error::Input("frame has no cameras".into()));
    }
    frame.gt.validate(spec)?;
    if let Some(mask) = &frame.visibility_mask {
        if mask.len() != frame.gt.labels.len() {
            return Err(crate::Error::Input(
                "visibility mask shape does not match ground truth".into(),
            ));
        }
    }
    Ok(())
}
