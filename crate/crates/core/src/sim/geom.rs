//! Analytic ray-solid intersection and point containment for the two scene
//! primitives (yawed boxes and vertical cylinders) plus the ground plane.

use crate::scalar::Scalar;

use super::{ShapeKind, SceneObject};

const RAY_EPS: f64 = 1e-9;

/// First intersection parameter t > eps of a ray with an object, if any.
pub fn ray_object<T: Scalar>(obj: &SceneObject<T>, origin: [T; 3], dir: [T; 3], z_lo: T) -> Option<T> {
    let z_hi = z_lo + obj.height;
    match obj.kind {
        ShapeKind::Box { length, width } => {
            // Into the box frame: rotate xy by -yaw around the center.
            let (s, c) = (obj.yaw.sin(), obj.yaw.cos());
            let ox = origin[0] - obj.center_xy[0];
            let oy = origin[1] - obj.center_xy[1];
            let o = [c * ox + s * oy, -s * ox + c * oy, origin[2]];
            let d = [
                c * dir[0] + s * dir[1],
                -s * dir[0] + c * dir[1],
                dir[2],
            ];
            let half = T::of_f64(0.5);
            let lo = [-(length * half), -(width * half), z_lo];
            let hi = [length * half, width * half, z_hi];
            slab_entry(o, d, lo, hi)
        }
        ShapeKind::Cylinder { radius } => {
            let ox = origin[0] - obj.center_xy[0];
            let oy = origin[1] - obj.center_xy[1];
            let (dx, dy) = (dir[0], dir[1]);
            let mut best: Option<T> = None;
            // Lateral surface.
            let a = dx * dx + dy * dy;
            if a.as_f64() > 0.0 {
                let b = T::of_f64(2.0) * (ox * dx + oy * dy);
                let cq = ox * ox + oy * oy - radius * radius;
                let disc = b * b - T::of_f64(4.0) * a * cq;
                if disc >= T::zero() {
                    let sq = disc.sqrt();
                    for t in [
                        (-b - sq) / (T::of_f64(2.0) * a),
                        (-b + sq) / (T::of_f64(2.0) * a),
                    ] {
                        if t.as_f64() > RAY_EPS {
                            let z = origin[2] + t * dir[2];
                            if z >= z_lo && z <= z_hi {
                                best = min_t(best, t);
                            }
                        }
                    }
                }
            }
            // Caps.
            if dir[2].as_f64().abs() > 0.0 {
                for zp in [z_lo, z_hi] {
                    let t = (zp - origin[2]) / dir[2];
                    if t.as_f64() > RAY_EPS {
                        let px = ox + t * dx;
                        let py = oy + t * dy;
                        if px * px + py * py <= radius * radius {
                            best = min_t(best, t);
                        }
                    }
                }
            }
            best
        }
    }
}

fn min_t<T: Scalar>(best: Option<T>, t: T) -> Option<T> {
    match best {
        Some(b) if b <= t => Some(b),
        _ => Some(t),
    }
}

fn slab_entry<T: Scalar>(o: [T; 3], d: [T; 3], lo: [T; 3], hi: [T; 3]) -> Option<T> {
    let mut t_enter = T::of_f64(f64::NEG_INFINITY);
    let mut t_exit = T::of_f64(f64::INFINITY);
    for a in 0..3 {
        if d[a].as_f64().abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = T::one() / d[a];
        let (mut t0, mut t1) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > t_enter {
            t_enter = t0;
        }
        if t1 < t_exit {
            t_exit = t1;
        }
    }
    if t_enter.as_f64() > RAY_EPS && t_enter <= t_exit {
        Some(t_enter)
    } else {
        None
    }
}

/// Is the point inside the object solid (ground-anchored extrusion)?
pub fn point_in_object<T: Scalar>(obj: &SceneObject<T>, p: [T; 3], z_lo: T) -> bool {
    let z_hi = z_lo + obj.height;
    if p[2] < z_lo || p[2] > z_hi {
        return false;
    }
    let dx = p[0] - obj.center_xy[0];
    let dy = p[1] - obj.center_xy[1];
    match obj.kind {
        ShapeKind::Box { length, width } => {
            let (s, c) = (obj.yaw.sin(), obj.yaw.cos());
            let lx = c * dx + s * dy;
            let ly = -s * dx + c * dy;
            let half = T::of_f64(0.5);
            lx.abs() <= length * half && ly.abs() <= width * half
        }
        ShapeKind::Cylinder { radius } => dx * dx + dy * dy <= radius * radius,
    }
}

/// Footprint circumradius, for separation checks during placement.
pub fn circumradius<T: Scalar>(obj: &SceneObject<T>) -> T {
    match obj.kind {
        ShapeKind::Box { length, width } => {
            let half = T::of_f64(0.5);
            ((length * half) * (length * half) + (width * half) * (width * half)).sqrt()
        }
        ShapeKind::Cylinder { radius } => radius,
    }
}

/// Footprint outline in the XY plane; boxes give 4 corners, cylinders a
/// regular 16-gon. Counter-clockwise.
pub fn footprint_polygon<T: Scalar>(obj: &SceneObject<T>) -> Vec<[T; 2]> {
    match obj.kind {
        ShapeKind::Box { length, width } => {
            let half = T::of_f64(0.5);
            let (s, c) = (obj.yaw.sin(), obj.yaw.cos());
            [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]
                .iter()
                .map(|&[sx, sy]| {
                    let lx = length * half * T::of_f64(sx);
                    let ly = width * half * T::of_f64(sy);
                    [
                        obj.center_xy[0] + c * lx - s * ly,
                        obj.center_xy[1] + s * lx + c * ly,
                    ]
                })
                .collect()
        }
        ShapeKind::Cylinder { radius } => (0..16)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / 16.0;
                [
                    obj.center_xy[0] + radius * T::of_f64(a.cos()),
                    obj.center_xy[1] + radius * T::of_f64(a.sin()),
                ]
            })
            .collect(),
    }
}

/// Result of casting one ray into the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit<T> {
    pub t: T,
    pub class_id: u16,
    pub reflectance: T,
    /// Index into the scene object list; `None` for the ground plane.
    pub object: Option<usize>,
}

pub fn raycast_scene<T: Scalar>(
    scene: &super::Scene<T>,
    origin: [T; 3],
    dir: [T; 3],
) -> Option<RayHit<T>> {
    let mut best: Option<RayHit<T>> = None;
    if dir[2].as_f64().abs() > 0.0 {
        let t = (scene.ground_height - origin[2]) / dir[2];
        if t.as_f64() > RAY_EPS {
            best = Some(RayHit {
                t,
                class_id: scene.ground_class,
                reflectance: scene.ground_reflectance,
                object: None,
            });
        }
    }
    for (i, obj) in scene.objects.iter().enumerate() {
        if let Some(t) = ray_object(obj, origin, dir, scene.ground_height) {
            if best.map(|b| t < b.t).unwrap_or(true) {
                best = Some(RayHit {
                    t,
                    class_id: obj.class_id,
                    reflectance: obj.reflectance,
                    object: Some(i),
                });
            }
        }
    }
    best
}
