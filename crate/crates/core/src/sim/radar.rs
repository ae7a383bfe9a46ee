//! Sparse radar simulation: a few jittered surface points per object,
//! carrying the object's planar velocity. The ground emits no returns.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::grid::RadarPoint;
use crate::scalar::Scalar;

use super::geom::ray_object;
use super::{rng_for, Scene, SimConfig, Stream};

pub fn simulate_radar<T: Scalar>(
    scene: &Scene<T>,
    seed: u64,
    config: &SimConfig,
) -> Vec<RadarPoint<T>> {
    let rc = &config.radar;
    let origin = [T::zero(), T::zero(), T::of_f64(rc.mount_z)];
    let mut rng = rng_for(seed, Stream::Radar);
    let jitter = Normal::new(0.0f64, rc.jitter_std.max(1e-12)).unwrap();
    let mut points = Vec::new();

    for obj in &scene.objects {
        let count = rng.gen_range(rc.points_min..=rc.points_max);
        for _ in 0..count {
            let to_center = [
                obj.center_xy[0] - origin[0],
                obj.center_xy[1] - origin[1],
            ];
            let base_az = to_center[1].as_f64().atan2(to_center[0].as_f64());
            // A few jittered aims; the exact center aim always hits because
            // the mount sits outside every object footprint.
            let mut hit_t: Option<T> = None;
            let mut hit_dir = [T::zero(); 3];
            for attempt in 0..8 {
                let az = if attempt < 7 {
                    base_az + rng.gen_range(-1.0..1.0) * rc.aim_jitter_deg.to_radians()
                } else {
                    base_az
                };
                // Aim slightly below the object's vertical midpoint.
                let target_z = scene.ground_height + obj.height * T::of_f64(0.4);
                let dist = (to_center[0] * to_center[0] + to_center[1] * to_center[1])
                    .sqrt()
                    .as_f64()
                    .max(1e-6);
                let dz = (target_z - origin[2]).as_f64() / dist;
                let norm = (1.0 + dz * dz).sqrt();
                let dir = [
                    T::of_f64(az.cos() / norm),
                    T::of_f64(az.sin() / norm),
                    T::of_f64(dz / norm),
                ];
                if let Some(t) = ray_object(obj, origin, dir, scene.ground_height) {
                    hit_t = Some(t);
                    hit_dir = dir;
                    break;
                }
            }
            let Some(t) = hit_t else { continue };
            let clamp = rc.jitter_clamp;
            let jx = jitter.sample(&mut rng).clamp(-clamp, clamp);
            let jy = jitter.sample(&mut rng).clamp(-clamp, clamp);
            points.push(RadarPoint {
                x: origin[0] + t * hit_dir[0] + T::of_f64(jx),
                y: origin[1] + t * hit_dir[1] + T::of_f64(jy),
                z: origin[2] + t * hit_dir[2],
                vx: obj.velocity[0],
                vy: obj.velocity[1],
            });
        }
    }
    points
}
