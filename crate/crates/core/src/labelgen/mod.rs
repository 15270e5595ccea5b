//! Semi-automated pose-label generation.
//!
//! Board corners give each frame's camera pose; triangulated keypoints give
//! the object pose in the marker frame once per session. Composing the two
//! projects the model into every frame, yielding keypoint, visibility and box
//! labels. Labeled frames can then be cut out, composited onto random
//! backgrounds and exported as a training set.

mod board;
mod export;
mod manifest;
mod propagate;
mod randomize;
mod segment;

pub use board::{camera_pose_from_board, homography, BoardPose, HIGH_RESIDUAL_PX};
pub use export::{export_dataset, mix_counts, ExportCounts, ExportIndex, ExportItem, ExportOptions, ItemSource, Split};
pub use manifest::{
    BBox, BoardSpec, DrConfig, DrRecord, FrameLabels, FrameRecord, LabeledKeypoint, MixRatio, ModelRef,
    ProjectManifest, Session, Similarity2D, SplitConfig,
};
pub use propagate::{
    bbox_from_model, bbox_from_points, camera_poses, keypoint_pixels, label_frame, object_pose_in_marker,
    propagate_labels, VISIBILITY_TOLERANCE,
};
pub use randomize::{domain_randomize, plan_samples, render_sample, Composite, DrSample, LabeledPatch};
pub use segment::{clip_to_rect, convex_hull, hull_mask, segment_foreground, Foreground, Mask};
