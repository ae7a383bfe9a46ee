//! Frame assembly: scene + all sensors + ground truth for one seed.

use rand::Rng;

use crate::error::Result;
use crate::grid::GridSpec;
use crate::scalar::Scalar;

use super::{
    build_camera_ring, generate_scene, rasterize_ground_truth, render_cameras, rng_for,
    simulate_lidar, simulate_radar, visibility_mask, Scenario, SensorFrame, SimConfig, Stream,
};

/// Generates a complete synchronized sample. When `scenario` is `None` the
/// tag is drawn from the configured mix using the frame's own seed.
pub fn generate_frame<T: Scalar>(
    seed: u64,
    spec: &GridSpec<T>,
    config: &SimConfig,
    scenario: Option<Scenario>,
) -> Result<SensorFrame<T>> {
    let scenario = scenario.unwrap_or_else(|| {
        let mut rng = rng_for(seed, Stream::Scenario);
        let mix = &config.scenario_mix;
        let total = (mix.day + mix.rain + mix.night).max(1e-12);
        let u: f64 = rng.gen_range(0.0..1.0) * total;
        if u < mix.day {
            Scenario::Day
        } else if u < mix.day + mix.rain {
            Scenario::Rain
        } else {
            Scenario::Night
        }
    });

    let scene = generate_scene::<T>(seed, config)?;
    let cameras = build_camera_ring::<T>(&config.cameras);
    let images = render_cameras(&scene, &cameras, scenario, seed, config);
    let lidar_points = simulate_lidar(&scene, scenario, seed, config);
    let radar_points = simulate_radar(&scene, seed, config);
    let gt = rasterize_ground_truth(&scene, spec);
    let mask = if config.emit_visibility_mask {
        Some(visibility_mask(&scene, spec, config))
    } else {
        None
    };

    Ok(SensorFrame {
        images,
        cameras,
        lidar_points,
        radar_points,
        gt,
        visibility_mask: mask,
        scenario,
        seed,
    })
}
