use rand::Rng;

use super::geometry::{Box3D, Frame, Frame2, PointCloud};
use super::voxel::VoxelConfig;

/// Uniform bound (per axis, meters) of the training-time center shift.
pub const TRAIN_SHIFT: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchCrop {
    /// Points in the (possibly shifted) reference frame, cropped to range.
    pub cloud: PointCloud,
    /// The object's box in that frame.
    pub label_box: Box3D,
    /// The world-frame box whose center/heading define the crop frame.
    pub reference: Box3D,
}

impl SearchCrop {
    pub fn frame(&self) -> Frame2 {
        self.reference.frame()
    }
}

/// Expresses `frame` in the center-origin, yaw-aligned frame of `ref_box`
/// after translating the reference by `shift` (world x/y).
pub fn canonicalize_with_shift(frame: &Frame, ref_box: &Box3D, shift: [f64; 2], range: &VoxelConfig) -> SearchCrop {
    let mut reference = *ref_box;
    reference.center[0] += shift[0];
    reference.center[1] += shift[1];
    let pose = reference.frame();
    let points = frame
        .cloud
        .points
        .iter()
        .map(|p| pose.to_local(p))
        .filter(|p| range.in_range(p))
        .collect();
    SearchCrop {
        cloud: PointCloud { points },
        label_box: pose.box_to_local(&frame.gt_box),
        reference,
    }
}

/// In train mode the reference center is shifted uniformly by up to
/// ±[`TRAIN_SHIFT`] m per axis before canonicalisation.
pub fn canonicalize<R: Rng>(frame: &Frame, ref_box: &Box3D, rng: &mut R, train_mode: bool, range: &VoxelConfig) -> SearchCrop {
    let shift = if train_mode {
        [rng.gen_range(-TRAIN_SHIFT..=TRAIN_SHIFT), rng.gen_range(-TRAIN_SHIFT..=TRAIN_SHIFT)]
    } else {
        [0.0, 0.0]
    };
    canonicalize_with_shift(frame, ref_box, shift, range)
}

/// Maps a box predicted in a crop's frame back to world coordinates.
pub fn decanonicalize(crop_frame: &Frame2, local: &Box3D) -> Box3D {
    crop_frame.box_to_world(local)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub cloud: PointCloud,
    /// Set when no point fell inside the box; training skips such samples.
    pub empty: bool,
}

/// Points inside `gt_box`, in the box's own frame (heading along +x).
pub fn make_template(frame: &Frame, gt_box: &Box3D) -> Template {
    let pose = gt_box.frame();
    let points: Vec<_> = frame
        .cloud
        .points
        .iter()
        .filter(|p| gt_box.contains(p))
        .map(|p| pose.to_local(p))
        .collect();
    Template {
        empty: points.is_empty(),
        cloud: PointCloud { points },
    }
}
