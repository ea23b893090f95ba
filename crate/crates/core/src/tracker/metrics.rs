use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Box3D;

/// IoU thresholds `0, 0.01, …, 1`.
pub const IOU_STEPS: usize = 100;
/// Center-error thresholds `0, 0.02, …, 2` meters.
pub const DISTANCE_STEPS: usize = 100;
pub const MAX_DISTANCE: f64 = 2.0;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        p[0] * q[1] - q[0] * p[1]
    }).sum::<f64>() / 2.0
}

/// Clips `subject` by every edge of the counter-clockwise convex `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Area of the intersection of two boxes' BEV rectangles.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    let poly = clip_convex(&a.bev_corners(), &b.bev_corners());
    if poly.len() < 3 {
        return 0.0;
    }
    polygon_area(&poly).max(0.0)
}

/// Yaw-aware 3-D IoU: BEV polygon intersection times z overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let za = (a.center[2] - a.height() / 2.0, a.center[2] + a.height() / 2.0);
    let zb = (b.center[2] - b.height() / 2.0, b.center[2] + b.height() / 2.0);
    let dz = (za.1.min(zb.1) - za.0.max(zb.0)).max(0.0);
    let inter = bev_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_error(a: &Box3D, b: &Box3D) -> f64 {
    (0..3).map(|d| (a.center[d] - b.center[d]).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub success: f64,
    pub precision: f64,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
}

impl OpeResult {
    /// Scores already-computed per-frame values.
    pub fn from_frames(ious: Vec<f64>, center_errors: Vec<f64>) -> Result<Self> {
        if ious.len() != center_errors.len() || ious.is_empty() {
            return Err(Error::Input(format!(
                "need equally many, and at least one, IoUs ({}) and errors ({})",
                ious.len(),
                center_errors.len()
            )));
        }
        let n = ious.len() as f64;
        let success = (0..=IOU_STEPS)
            .map(|k| {
                let tau = k as f64 / IOU_STEPS as f64;
                ious.iter().filter(|&&v| v > tau).count() as f64 / n
            })
            .sum::<f64>()
            / (IOU_STEPS + 1) as f64;
        let precision = (0..=DISTANCE_STEPS)
            .map(|k| {
                let delta = k as f64 * MAX_DISTANCE / DISTANCE_STEPS as f64;
                center_errors.iter().filter(|&&e| e <= delta).count() as f64 / n
            })
            .sum::<f64>()
            / (DISTANCE_STEPS + 1) as f64;
        Ok(Self {
            success,
            precision,
            ious,
            center_errors,
        })
    }

    /// Pools the frames of several results and rescores them.
    pub fn merge(results: &[OpeResult]) -> Result<Self> {
        let ious = results.iter().flat_map(|r| r.ious.iter().copied()).collect();
        let errs = results.iter().flat_map(|r| r.center_errors.iter().copied()).collect();
        Self::from_frames(ious, errs)
    }
}

/// Scores frames `1..` (frame 0 is the given initialisation).
pub fn evaluate_ope(pred: &[Box3D], gt: &[Box3D]) -> Result<OpeResult> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!("{} predicted boxes for {} ground-truth boxes", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::Input("a track needs at least two frames to score".into()));
    }
    let ious = pred.iter().zip(gt).skip(1).map(|(p, g)| iou_3d(p, g)).collect();
    let errs = pred.iter().zip(gt).skip(1).map(|(p, g)| center_error(p, g)).collect();
    OpeResult::from_frames(ious, errs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Frame2;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cube(x: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0).unwrap()
    }

    #[test]
    fn half_offset_cubes() {
        assert_eq!(iou_3d(&cube(0.0), &cube(0.5)), 1.0 / 3.0);
    }

    #[test]
    fn rotated_square_overlap() {
        // unit square vs. itself rotated 45°: intersection is a regular octagon of area 2(√2 − 1)
        let a = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        let b = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], PI / 4.0).unwrap();
        let oct = 2.0 * (2f64.sqrt() - 1.0);
        assert!((bev_intersection(&a, &b) - oct).abs() < 1e-12);
        assert!((iou_3d(&a, &b) - oct / (2.0 - oct)).abs() < 1e-12);
    }

    #[test]
    fn disjoint_and_z_separated() {
        assert_eq!(iou_3d(&cube(0.0), &cube(3.0)), 0.0);
        let up = Box3D::new([0.0, 0.0, 2.0], [1.0, 1.0, 1.0], 0.0).unwrap();
        assert_eq!(iou_3d(&cube(0.0), &up), 0.0);
    }

    #[test]
    fn perfect_track_scores() {
        let gt: Vec<Box3D> = (0..10).map(|i| Box3D::new([i as f64 * 0.3, 1.0, -0.5], [1.8, 4.0, 1.5], 0.1 * i as f64).unwrap()).collect();
        let r = evaluate_ope(&gt, &gt).unwrap();
        assert_eq!(r.precision, 1.0);
        assert!(r.success >= 1.0 - 1.0 / IOU_STEPS as f64);
        assert_eq!(r.ious.len(), 9);
    }

    #[test]
    fn constant_one_meter_error() {
        let gt: Vec<Box3D> = (0..6).map(|i| cube(i as f64 * 10.0)).collect();
        let pred: Vec<Box3D> = gt
            .iter()
            .enumerate()
            .map(|(i, b)| if i == 0 { *b } else { Box3D::new([b.center[0], 1.0, 0.0], b.size, 0.0).unwrap() })
            .collect();
        let r = evaluate_ope(&pred, &gt).unwrap();
        assert!((r.precision - 0.5).abs() <= 0.01);
        assert!(r.success < 1e-12);
    }

    #[test]
    fn length_mismatch_is_input_error() {
        assert!(matches!(evaluate_ope(&[cube(0.0)], &[cube(0.0), cube(1.0)]), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_and_reflexive(ax in -2.0..2.0f64, ay in -2.0..2.0f64, ayaw in -3.1..3.1f64,
                                               bx in -2.0..2.0f64, by in -2.0..2.0f64, byaw in -3.1..3.1f64,
                                               w in 0.5..2.0f64, l in 1.0..5.0f64) {
            let a = Box3D::new([ax, ay, 0.0], [w, l, 1.5], ayaw).unwrap();
            let b = Box3D::new([bx, by, 0.2], [w * 0.9, l, 1.4], byaw).unwrap();
            let (ab, ba) = (iou_3d(&a, &b), iou_3d(&b, &a));
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ope_invariant_to_rigid_motion(tx in -50.0..50.0f64, ty in -50.0..50.0f64, rot in -3.1..3.1f64, seed in 0u64..20) {
            let seq = crate::scene::generate_sequence(seed, 8, 0.0, 30).unwrap();
            let gt = seq.gt_boxes();
            let pred: Vec<Box3D> = gt.iter().enumerate().map(|(i, b)| {
                let mut p = *b;
                p.center[0] += 0.137 * (i % 3) as f64;
                p.yaw = crate::scene::wrap_angle(p.yaw + 0.05 * i as f64);
                p
            }).collect();
            let pose = Frame2 { origin: [tx, ty, 0.0], yaw: rot };
            let moved = |bs: &[Box3D]| bs.iter().map(|b| pose.box_to_world(b)).collect::<Vec<_>>();
            let r0 = evaluate_ope(&pred, &gt).unwrap();
            let r1 = evaluate_ope(&moved(&pred), &moved(&gt)).unwrap();
            for (a, b) in r0.ious.iter().zip(&r1.ious) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((r0.precision - r1.precision).abs() < 1e-12);
        }
    }
}
