//! Spinning-lidar simulation: first-hit ray casting over a fixed
//! azimuth/elevation lattice.

use rand::Rng;

use crate::grid::LidarPoint;
use crate::scalar::Scalar;

use super::geom::raycast_scene;
use super::{rng_for, Scenario, Scene, SimConfig, Stream};

/// Casts the configured ray lattice from the lidar mount and returns one
/// surface point per hit, carrying the surface reflectance. Rain drops each
/// return independently (seeded); day and night outputs are identical.
pub fn simulate_lidar<T: Scalar>(
    scene: &Scene<T>,
    scenario: Scenario,
    seed: u64,
    config: &SimConfig,
) -> Vec<LidarPoint<T>> {
    let lc = &config.lidar;
    let origin = [T::zero(), T::zero(), T::of_f64(lc.mount_z)];
    let mut rng = rng_for(seed, Stream::Lidar);
    let mut points = Vec::new();
    for ei in 0..lc.elevation_steps {
        let elev = if lc.elevation_steps == 1 {
            lc.elev_min_deg
        } else {
            lc.elev_min_deg
                + (lc.elev_max_deg - lc.elev_min_deg) * ei as f64
                    / (lc.elevation_steps - 1) as f64
        }
        .to_radians();
        for ai in 0..lc.azimuth_steps {
            let az = std::f64::consts::TAU * ai as f64 / lc.azimuth_steps as f64;
            let dir = [
                T::of_f64(elev.cos() * az.cos()),
                T::of_f64(elev.cos() * az.sin()),
                T::of_f64(elev.sin()),
            ];
            let Some(hit) = raycast_scene(scene, origin, dir) else {
                continue;
            };
            if scenario == Scenario::Rain && rng.gen_range(0.0..1.0) < lc.rain_drop_prob {
                continue;
            }
            let point = if hit.object.is_none() {
                // Ground hit: the z coordinate is the plane height exactly.
                LidarPoint {
                    x: origin[0] + hit.t * dir[0],
                    y: origin[1] + hit.t * dir[1],
                    z: scene.ground_height,
                    reflectance: hit.reflectance,
                }
            } else {
                LidarPoint {
                    x: origin[0] + hit.t * dir[0],
                    y: origin[1] + hit.t * dir[1],
                    z: origin[2] + hit.t * dir[2],
                    reflectance: hit.reflectance,
                }
            };
            points.push(point);
        }
    }
    points
}
