//! Synthetic LiDAR-like tracking sequences: a rigid box-shell object moving
//! along a smooth trajectory among uniform clutter, with per-frame dropout.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::geometry::{wrap_angle, Box3D, Frame, Frame2, Point3, PointCloud, Sequence};
use crate::error::{Error, Result};

pub const MAX_STEP_TRANSLATION: f64 = 0.4;
pub const MAX_STEP_YAW: f64 = 0.15;

/// Half-side of the square (centered on the object) that clutter is drawn in.
const CLUTTER_HALF_SIDE: f64 = 6.0;
const SENSOR_HEIGHT: f64 = 1.6;

fn sample_shell<R: Rng>(rng: &mut R, size: [f64; 3], n: usize) -> Vec<Point3> {
    let [w, l, h] = size;
    // faces: ±x (w·h), ±y (l·h), ±z (l·w)
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let u = |rng: &mut R, extent: f64| rng.gen_range(-extent / 2.0..=extent / 2.0);
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            match face / 2 {
                0 => [sign * l / 2.0, u(rng, w), u(rng, h)],
                1 => [u(rng, l), sign * w / 2.0, u(rng, h)],
                _ => [u(rng, l), u(rng, w), sign * h / 2.0],
            }
        })
        .collect()
}

/// Deterministic for a given seed. Each frame's box tracks the object exactly
/// and contains at least one object point.
pub fn generate_sequence(seed: u64, n_frames: usize, clutter_density: f64, point_budget: usize) -> Result<Sequence> {
    if n_frames < 2 {
        return Err(Error::Input(format!("a sequence needs at least 2 frames, got {n_frames}")));
    }
    if point_budget == 0 || !(clutter_density >= 0.0) {
        return Err(Error::Input("point budget must be positive and clutter density non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = [rng.gen_range(1.5..2.0), rng.gen_range(3.4..4.6), rng.gen_range(1.3..1.8)];
    let shell = sample_shell(&mut rng, size, point_budget);

    let mut center = [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), size[2] / 2.0 - SENSOR_HEIGHT];
    let mut yaw = rng.gen_range(-PI..PI);
    let mut speed: f64 = rng.gen_range(0.1..0.35);
    let mut yaw_rate: f64 = rng.gen_range(-0.08..0.08);
    let keep_lo = rng.gen_range(0.3..0.6);
    let ground = -SENSOR_HEIGHT;
    let n_clutter = (clutter_density * (2.0 * CLUTTER_HALF_SIDE).powi(2)).round() as usize;

    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        if t > 0 {
            speed = (speed + rng.gen_range(-0.03..0.03)).clamp(0.0, MAX_STEP_TRANSLATION);
            yaw_rate = (yaw_rate + rng.gen_range(-0.02..0.02)).clamp(-MAX_STEP_YAW, MAX_STEP_YAW);
            yaw = wrap_angle(yaw + yaw_rate);
            center[0] += speed * yaw.cos();
            center[1] += speed * yaw.sin();
        }
        let gt_box = Box3D::new(center, size, yaw)?;
        let pose = gt_box.frame();

        let keep = rng.gen_range(keep_lo..1.0);
        let mut points: Vec<Point3> = shell
            .iter()
            .filter(|_| rng.gen_bool(keep))
            .map(|p| pose.to_world(p))
            .collect();
        if points.is_empty() {
            let i = rng.gen_range(0..shell.len());
            points.push(pose.to_world(&shell[i]));
        }
        let mut placed = 0;
        while placed < n_clutter {
            let p = [
                center[0] + rng.gen_range(-CLUTTER_HALF_SIDE..CLUTTER_HALF_SIDE),
                center[1] + rng.gen_range(-CLUTTER_HALF_SIDE..CLUTTER_HALF_SIDE),
                ground + rng.gen_range(0.0..2.0),
            ];
            if !gt_box.contains(&p) {
                points.push(p);
                placed += 1;
            }
        }
        frames.push(Frame {
            cloud: PointCloud::new(points)?,
            gt_box,
        });
    }
    Ok(Sequence {
        frames,
        object_size: size,
    })
}

/// Object shell placed at the origin (for tests and examples).
pub fn object_points_in_frame(seed: u64, size: [f64; 3], n: usize, pose: &Frame2) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_shell(&mut rng, size, n).iter().map(|p| pose.to_world(p)).collect()
}
