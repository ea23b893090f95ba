//! Scene data: boxes and clouds, synthetic sequences, the search/template
//! cropping pipeline, and voxelisation.

mod crop;
mod geometry;
mod io;
mod synth;
mod voxel;

pub use crop::{canonicalize, canonicalize_with_shift, decanonicalize, make_template, SearchCrop, Template, TRAIN_SHIFT};
pub use geometry::{wrap_angle, Box3D, Frame, Frame2, Point3, PointCloud, Sequence};
pub use io::{read_sequence, read_sequence_dir, write_sequence};
pub use synth::{generate_sequence, object_points_in_frame, MAX_STEP_TRANSLATION, MAX_STEP_YAW};
pub use voxel::{voxelize, VoxelConfig, VoxelGrid, VOXEL_FEATURES};
