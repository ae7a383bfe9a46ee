//! Surround camera rig: evenly yaw-spaced pinhole cameras looking outward
//! with a slight downward pitch.

use crate::grid::CameraModel;
use crate::scalar::Scalar;

use super::CameraRigConfig;

/// Continuous pixel convention: a point projects to u = fx*X/Z + W/2 and is
/// in-image when 0 <= u < W; pixel (r, c) covers [c, c+1) x [r, r+1).
pub fn build_camera_ring<T: Scalar>(cfg: &CameraRigConfig) -> Vec<CameraModel<T>> {
    let fx = (cfg.width as f64 / 2.0) / (cfg.hfov_deg.to_radians() / 2.0).tan();
    (0..cfg.count)
        .map(|i| {
            let yaw = std::f64::consts::TAU * i as f64 / cfg.count as f64;
            let pitch = cfg.pitch_deg.to_radians();
            // Camera axes in ego coordinates: z forward (pitched down),
            // x right, y down. Rows of R are the axes (world -> camera).
            let fwd = [
                pitch.cos() * yaw.cos(),
                pitch.cos() * yaw.sin(),
                -pitch.sin(),
            ];
            let right = [yaw.sin(), -yaw.cos(), 0.0];
            let down = cross(fwd, right);
            let center = [
                cfg.mount_radius * yaw.cos(),
                cfg.mount_radius * yaw.sin(),
                cfg.mount_z,
            ];
            let r = [right, down, fwd];
            let mut ext = [[T::zero(); 4]; 4];
            for (row, axis) in r.iter().enumerate() {
                for col in 0..3 {
                    ext[row][col] = T::of_f64(axis[col]);
                }
                ext[row][3] = T::of_f64(-dot(*axis, center));
            }
            ext[3][3] = T::one();
            let mut intr = [[T::zero(); 3]; 3];
            intr[0][0] = T::of_f64(fx);
            intr[1][1] = T::of_f64(fx);
            intr[0][2] = T::of_f64(cfg.width as f64 / 2.0);
            intr[1][2] = T::of_f64(cfg.height as f64 / 2.0);
            intr[2][2] = T::one();
            CameraModel {
                intrinsics: intr,
                extrinsics: ext,
                width: cfg.width,
                height: cfg.height,
            }
        })
        .collect()
}

/// Camera center in ego coordinates recovered from extrinsics: -R^T t.
pub fn camera_center<T: Scalar>(cam: &CameraModel<T>) -> [T; 3] {
    let e = &cam.extrinsics;
    let mut c = [T::zero(); 3];
    for (i, ci) in c.iter_mut().enumerate() {
        let mut acc = T::zero();
        for row in 0..3 {
            acc += e[row][i] * e[row][3];
        }
        *ci = -acc;
    }
    c
}

/// Ego-frame direction of the ray through continuous pixel (u, v).
pub fn pixel_ray_dir<T: Scalar>(cam: &CameraModel<T>, u: T, v: T) -> [T; 3] {
    let k = &cam.intrinsics;
    let dx = (u - k[0][2]) / k[0][0];
    let dy = (v - k[1][2]) / k[1][1];
    // Camera-frame direction (dx, dy, 1) rotated back to ego: R^T d.
    let e = &cam.extrinsics;
    let mut d = [T::zero(); 3];
    for (i, di) in d.iter_mut().enumerate() {
        *di = e[0][i] * dx + e[1][i] * dy + e[2][i];
    }
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    [d[0] / norm, d[1] / norm, d[2] / norm]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_cameras_are_valid_rigid_transforms() {
        let cams = build_camera_ring::<f64>(&CameraRigConfig::default());
        assert_eq!(cams.len(), 6);
        for cam in &cams {
            cam.validate().unwrap();
        }
    }

    #[test]
    fn projection_and_ray_agree() {
        let cams = build_camera_ring::<f64>(&CameraRigConfig::default());
        let p = [3.0, -4.0, 0.1];
        let mut seen = 0;
        for cam in &cams {
            let Some(uv) = cam.project(p) else { continue };
            seen += 1;
            let origin = camera_center(cam);
            let dir = pixel_ray_dir(cam, uv[0], uv[1]);
            // The ray through the projected pixel must pass through p.
            let dp = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
            let len = (dp[0] * dp[0] + dp[1] * dp[1] + dp[2] * dp[2]).sqrt();
            for a in 0..3 {
                assert!((dp[a] / len - dir[a]).abs() < 1e-9);
            }
        }
        assert!(seen > 0, "point in front of no camera");
    }
}
