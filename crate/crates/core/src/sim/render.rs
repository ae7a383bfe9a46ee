//! Class-colored camera rendering by per-pixel ray casting (nearest depth
//! wins), with night and rain degradations applied to images only.

use rand_distr::{Distribution, Normal};

use crate::grid::CameraModel;
use crate::scalar::Scalar;

use super::camera::{camera_center, pixel_ray_dir};
use super::geom::raycast_scene;
use super::{rng_for, ImageRaster, Scenario, Scene, SimConfig, Stream};

pub fn render_cameras<T: Scalar>(
    scene: &Scene<T>,
    cameras: &[CameraModel<T>],
    scenario: Scenario,
    seed: u64,
    config: &SimConfig,
) -> Vec<ImageRaster> {
    let mut rng = rng_for(seed, Stream::Image);
    let noise = Normal::new(0.0f64, config.night_noise_std.max(1e-12)).unwrap();
    let class_color = |class_id: u16| -> [f64; 3] {
        if class_id == scene.ground_class {
            return config.ground_color;
        }
        config
            .classes
            .iter()
            .find(|d| d.class_id == class_id)
            .map(|d| d.color)
            .unwrap_or([1.0, 0.0, 1.0])
    };

    cameras
        .iter()
        .map(|cam| {
            let (w, h) = (cam.width, cam.height);
            let origin = camera_center(cam);
            let mut float_rgb = vec![0.0f64; w * h * 3];
            for row in 0..h {
                for col in 0..w {
                    let u = T::of_f64(col as f64 + 0.5);
                    let v = T::of_f64(row as f64 + 0.5);
                    let dir = pixel_ray_dir(cam, u, v);
                    let color = match raycast_scene(scene, origin, dir) {
                        Some(hit) => class_color(hit.class_id),
                        None => config.sky_color,
                    };
                    let base = (row * w + col) * 3;
                    float_rgb[base..base + 3].copy_from_slice(&color);
                }
            }

            match scenario {
                Scenario::Day => {}
                Scenario::Night => {
                    // Sensor noise enters before the gain drop, so a zero
                    // factor yields a fully black image.
                    for v in float_rgb.iter_mut() {
                        *v = config.night_factor * (*v + noise.sample(&mut rng));
                    }
                }
                Scenario::Rain => {
                    if config.rain_blur {
                        float_rgb = box_blur3(&float_rgb, w, h);
                    }
                }
            }

            let rgb = float_rgb
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            ImageRaster {
                width: w,
                height: h,
                rgb,
            }
        })
        .collect()
}

fn box_blur3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let r = row as i64 + dr;
                        let c = col as i64 + dc;
                        if r >= 0 && r < h as i64 && c >= 0 && c < w as i64 {
                            acc += src[((r as usize) * w + c as usize) * 3 + ch];
                            n += 1.0;
                        }
                    }
                }
                out[(row * w + col) * 3 + ch] = acc / n;
            }
        }
    }
    out
}
