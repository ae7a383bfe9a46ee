//! Seeded scene generation: class-attributed objects placed without overlap.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::geom::circumradius;
use super::{rng_for, Scene, SceneObject, ShapeKind, SimConfig, Stream};

/// Deterministically place objects for a (seed, config) pair. Placement
/// keeps footprint circumcircles separated by `separation_margin`, so true
/// footprint overlap is zero.
pub fn generate_scene<T: Scalar>(seed: u64, config: &SimConfig) -> Result<Scene<T>> {
    if config.num_objects_min > config.num_objects_max {
        return Err(Error::InvalidArgument(
            "num_objects_min > num_objects_max".into(),
        ));
    }
    let mut rng = rng_for(seed, Stream::Scene);
    let count = if config.num_objects_max == 0 {
        0
    } else {
        rng.gen_range(config.num_objects_min..=config.num_objects_max)
    };

    let mut objects: Vec<SceneObject<T>> = Vec::with_capacity(count);
    for _ in 0..count {
        let def = &config.classes[rng.gen_range(0..config.classes.len())];
        let length = rng.gen_range(def.len_range[0]..=def.len_range[1]);
        let width = if def.cylinder {
            length
        } else {
            rng.gen_range(def.width_range[0]..=def.width_range[1])
        };
        let height = rng.gen_range(def.height_range[0]..=def.height_range[1]);
        let speed = if def.speed_range[1] > 0.0 {
            rng.gen_range(def.speed_range[0]..=def.speed_range[1])
        } else {
            0.0
        };
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let reflectance = rng.gen_range(def.reflectance_range[0]..=def.reflectance_range[1]);
        let yaw = rng.gen_range(0.0..std::f64::consts::TAU);

        let kind = if def.cylinder {
            ShapeKind::Cylinder {
                radius: T::of_f64(length / 2.0),
            }
        } else {
            ShapeKind::Box {
                length: T::of_f64(length),
                width: T::of_f64(width),
            }
        };
        let proto = SceneObject {
            kind,
            center_xy: [T::zero(), T::zero()],
            yaw: T::of_f64(yaw),
            height: T::of_f64(height),
            class_id: def.class_id,
            velocity: [
                T::of_f64(speed * heading.cos()),
                T::of_f64(speed * heading.sin()),
            ],
            reflectance: T::of_f64(reflectance),
        };
        let own_r = circumradius(&proto).as_f64();

        let mut placed = false;
        for _ in 0..config.max_place_attempts {
            let radius = {
                let lo = config.spawn_radius_min + own_r;
                let hi = config.spawn_radius_max;
                if lo >= hi {
                    return Err(Error::Generation(format!(
                        "object of class {} with circumradius {own_r:.2} cannot fit the spawn annulus",
                        def.name
                    )));
                }
                // Area-uniform in the annulus.
                (rng.gen_range(lo * lo..hi * hi)).sqrt()
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let cx = radius * angle.cos();
            let cy = radius * angle.sin();
            let ok = objects.iter().all(|other| {
                let other_r = circumradius(other).as_f64();
                let dx = cx - other.center_xy[0].as_f64();
                let dy = cy - other.center_xy[1].as_f64();
                (dx * dx + dy * dy).sqrt() >= own_r + other_r + config.separation_margin
            });
            if ok {
                let mut obj = proto;
                obj.center_xy = [T::of_f64(cx), T::of_f64(cy)];
                objects.push(obj);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place a {} without violating the separation constraint after {} attempts",
                def.name, config.max_place_attempts
            )));
        }
    }

    Ok(Scene {
        objects,
        ground_height: T::of_f64(config.ground_height),
        ground_reflectance: T::of_f64(config.ground_reflectance),
        ground_class: config.ground_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_gives_ground_only() {
        let mut cfg = SimConfig::default();
        cfg.num_objects_min = 0;
        cfg.num_objects_max = 0;
        let scene = generate_scene::<f64>(0, &cfg).unwrap();
        assert!(scene.objects.is_empty());
        assert_eq!(scene.ground_class, 1);
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = SimConfig::default();
        let a = generate_scene::<f32>(42, &cfg).unwrap();
        let b = generate_scene::<f32>(42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene::<f32>(43, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unsatisfiable_placement_errors() {
        let mut cfg = SimConfig::default();
        cfg.num_objects_min = 60;
        cfg.num_objects_max = 60;
        cfg.max_place_attempts = 8;
        let err = generate_scene::<f64>(1, &cfg).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        assert!(err.to_string().contains("separation"));
    }
}
