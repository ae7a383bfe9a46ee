//! Exact ground-truth rasterization and lidar-ray visibility masking.

use crate::grid::{voxel_center, GridSpec, OccupancyGrid};
use crate::scalar::Scalar;

use super::geom::{circumradius, point_in_object};
use super::{Scene, SimConfig};

/// Labels each voxel by the object containing its center, else the ground
/// class when the center lies in the ground slab, else empty.
pub fn rasterize_ground_truth<T: Scalar>(scene: &Scene<T>, spec: &GridSpec<T>) -> OccupancyGrid {
    let dims = spec.base_shape();
    let mut grid = OccupancyGrid::empty(dims);

    // Ground slab: every voxel whose center is below the plane.
    let v = spec.voxel_size.as_f64();
    let zmin = spec.z_min.as_f64();
    let g = scene.ground_height.as_f64();
    let ground_layers = (((g - zmin) / v).ceil() as usize).min(dims[2]);
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..ground_layers {
                let cz = zmin + v * (k as f64 + 0.5);
                if cz < g {
                    grid.set(i, j, k, scene.ground_class);
                }
            }
        }
    }

    // Objects override: iterate each object's bounding index range only.
    for obj in &scene.objects {
        let r = circumradius(obj).as_f64();
        let cx = obj.center_xy[0].as_f64();
        let cy = obj.center_xy[1].as_f64();
        let z_hi = g + obj.height.as_f64();
        let i_lo = clamp_cell((cx - r - spec.x_min.as_f64()) / v, dims[0]);
        let i_hi = clamp_cell((cx + r - spec.x_min.as_f64()) / v + 1.0, dims[0]);
        let j_lo = clamp_cell((cy - r - spec.y_min.as_f64()) / v, dims[1]);
        let j_hi = clamp_cell((cy + r - spec.y_min.as_f64()) / v + 1.0, dims[1]);
        let k_lo = clamp_cell((g - zmin) / v, dims[2]);
        let k_hi = clamp_cell((z_hi - zmin) / v + 1.0, dims[2]);
        for i in i_lo..=i_hi.min(dims[0].saturating_sub(1)) {
            for j in j_lo..=j_hi.min(dims[1].saturating_sub(1)) {
                for k in k_lo..=k_hi.min(dims[2].saturating_sub(1)) {
                    let c = voxel_center([i, j, k], spec, 0).unwrap();
                    if point_in_object(obj, c, scene.ground_height) {
                        grid.set(i, j, k, obj.class_id);
                    }
                }
            }
        }
    }
    grid
}

fn clamp_cell(raw: f64, n: usize) -> usize {
    if raw.is_nan() || raw < 0.0 {
        0
    } else {
        (raw as usize).min(n.saturating_sub(1))
    }
}

/// Visibility by lidar-ray traversal: every voxel a ray crosses before its
/// hit (plus the hit voxel) is visible. Uses the same ray lattice as
/// [`super::simulate_lidar`], ignoring weather dropout.
pub fn visibility_mask<T: Scalar>(
    scene: &Scene<T>,
    spec: &GridSpec<T>,
    config: &SimConfig,
) -> Vec<bool> {
    let dims = spec.base_shape();
    let mut mask = vec![false; dims[0] * dims[1] * dims[2]];
    let lc = &config.lidar;
    let origin = [0.0, 0.0, lc.mount_z];

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
            let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
            let dir_t = [T::of_f64(dir[0]), T::of_f64(dir[1]), T::of_f64(dir[2])];
            let origin_t = [T::of_f64(origin[0]), T::of_f64(origin[1]), T::of_f64(origin[2])];
            let t_max = super::geom::raycast_scene(scene, origin_t, dir_t)
                .map(|h| h.t.as_f64())
                .unwrap_or(f64::INFINITY);
            traverse_ray(spec, origin, dir, t_max, &mut |i, j, k| {
                mask[(i * dims[1] + j) * dims[2] + k] = true;
            });
        }
    }
    mask
}

/// Amanatides-Woo voxel traversal up to parameter `t_max` (inclusive of the
/// voxel containing the endpoint).
fn traverse_ray<T: Scalar>(
    spec: &GridSpec<T>,
    origin: [f64; 3],
    dir: [f64; 3],
    t_max: f64,
    visit: &mut impl FnMut(usize, usize, usize),
) {
    let dims = spec.base_shape();
    let v = spec.voxel_size.as_f64();
    let lo = [spec.x_min.as_f64(), spec.y_min.as_f64(), spec.z_min.as_f64()];
    let hi = [spec.x_max.as_f64(), spec.y_max.as_f64(), spec.z_max.as_f64()];

    // Clip the ray to the grid box.
    let mut t0 = 0.0f64;
    let mut t1 = t_max;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 > t1 {
        return;
    }
    let start = [
        origin[0] + dir[0] * t0,
        origin[1] + dir[1] * t0,
        origin[2] + dir[2] * t0,
    ];
    let mut cell = [0isize; 3];
    for a in 0..3 {
        let c = ((start[a] - lo[a]) / v).floor() as isize;
        cell[a] = c.clamp(0, dims[a] as isize - 1);
    }
    let mut t_next = [0.0f64; 3];
    let mut t_delta = [0.0f64; 3];
    let mut step = [0isize; 3];
    for a in 0..3 {
        if dir[a] > 0.0 {
            step[a] = 1;
            let boundary = lo[a] + (cell[a] as f64 + 1.0) * v;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = v / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            let boundary = lo[a] + cell[a] as f64 * v;
            t_next[a] = (boundary - origin[a]) / dir[a];
            t_delta[a] = v / -dir[a];
        } else {
            t_next[a] = f64::INFINITY;
            t_delta[a] = f64::INFINITY;
        }
    }
    loop {
        visit(cell[0] as usize, cell[1] as usize, cell[2] as usize);
        let axis = (0..3).min_by(|&a, &b| t_next[a].partial_cmp(&t_next[b]).unwrap()).unwrap();
        let t = t_next[axis];
        if t > t1 {
            return;
        }
        cell[axis] += step[axis];
        if cell[axis] < 0 || cell[axis] >= dims[axis] as isize {
            return;
        }
        t_next[axis] += t_delta[axis];
    }
}
