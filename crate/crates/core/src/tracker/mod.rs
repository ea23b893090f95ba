//! Tracking loop, one-pass evaluation, training and the transformer ablation.

mod ablation;
mod metrics;
mod track;
mod train;

pub use ablation::{evaluate_model, run_ablation, write_ablation_csv, AblationRow};
pub use metrics::{bev_intersection, center_error, evaluate_ope, iou_3d, OpeResult, DISTANCE_STEPS, IOU_STEPS, MAX_DISTANCE};
pub(crate) use track::frame_seed;
pub use track::{predict, track_sequence, TrackState, TrackStep};
pub use train::{make_sample, template_grids, train, write_loss_csv, LossRecord, Sample, TrainConfig, Trainer};
