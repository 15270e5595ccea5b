//! Object pose recovery and per-frame label propagation.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{project, CameraIntrinsics, Pixel, RigidTransform, Vec3};
use crate::model::ObjectModel;
use crate::raster::render_depth;
use crate::rigid_align::{horn_align, Alignment, Correspondences3D};
use crate::triangulation::Keypoint3D;

use super::manifest::{BBox, FrameLabels, FrameRecord, LabeledKeypoint, Session};

/// A keypoint stays visible if it is at most this far behind the rendered surface.
pub const VISIBILITY_TOLERANCE: f64 = 0.005;

/// `marker_from_object` aligning model keypoints onto triangulated ones.
pub fn object_pose_in_marker(triangulated: &[Keypoint3D], model: &ObjectModel) -> Result<Alignment> {
    let mut pairs = Vec::with_capacity(triangulated.len());
    for k in triangulated {
        let m = model
            .keypoint(&k.keypoint_id)
            .ok_or_else(|| Error::NotFound { kind: "keypoint", id: k.keypoint_id.clone() })?;
        pairs.push((*m, k.position));
    }
    horn_align(&Correspondences3D::new(pairs))
}

/// Projected box around `points`, clamped to the image. The flag reports
/// whether clamping changed it.
pub fn bbox_from_points(
    camera_from_object: &RigidTransform,
    points: &[Vec3],
    intr: &CameraIntrinsics,
) -> Result<(BBox, bool)> {
    let mut px = Vec::with_capacity(points.len());
    for p in points {
        let c = camera_from_object.transform_point(p);
        if !(c.z > 0.0) {
            return Err(Error::BehindCamera { z: c.z });
        }
        px.push(project(intr, &c)?);
    }
    let b = BBox::enclosing(&px).ok_or_else(|| Error::invalid("points", "no points to bound"))?;
    Ok(b.clamped(intr.width(), intr.height()))
}

/// Box around the projected mesh, or the keypoints for a model without mesh.
pub fn bbox_from_model(
    camera_from_object: &RigidTransform,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
) -> Result<(BBox, bool)> {
    bbox_from_points(camera_from_object, &model.outline_points(), intr)
}

/// Labels for one frame seen from `camera_from_object`.
///
/// Visibility tests each keypoint against a z-buffer render of the mesh.
pub fn label_frame(camera_from_object: &RigidTransform, model: &ObjectModel, intr: &CameraIntrinsics) -> FrameLabels {
    let mut projected = Vec::with_capacity(model.keypoints.len());
    for k in &model.keypoints {
        let c = camera_from_object.transform_point(&k.position);
        match project(intr, &c) {
            Ok(p) => projected.push((k, p, c.z)),
            Err(_) => return FrameLabels::invalid(format!("keypoint `{}` is behind the camera", k.id)),
        }
    }
    let (bbox, clamped) = match bbox_from_model(camera_from_object, model, intr) {
        Ok(b) => b,
        Err(e) => return FrameLabels::invalid(e.to_string()),
    };
    let depth = (!model.mesh_faces.is_empty()).then(|| render_depth(camera_from_object, model, intr));
    let keypoints = projected
        .into_iter()
        .map(|(k, pixel, z)| {
            let visible = intr.contains(pixel)
                && depth
                    .as_ref()
                    .and_then(|d| d.depth_at(pixel))
                    .is_none_or(|surface| z <= surface + VISIBILITY_TOLERANCE);
            LabeledKeypoint { keypoint_id: k.id.clone(), pixel, visible }
        })
        .collect();
    FrameLabels { valid: true, invalid_reason: None, keypoints, bbox: Some(bbox), bbox_clamped: clamped }
}

/// Projects the solved object into every frame of the session.
///
/// Frames without a camera pose are returned with invalid labels.
pub fn propagate_labels(session: &Session, model: &ObjectModel, intr: &CameraIntrinsics) -> Result<Vec<FrameRecord>> {
    let marker_from_object =
        session.object_pose_in_marker.ok_or_else(|| Error::MissingObjectPose { session: session.id.clone() })?;
    Ok(session
        .frames
        .par_iter()
        .map(|f| {
            let labels = match &f.camera_pose_in_marker {
                Some(mfc) => label_frame(&mfc.invert().compose(&marker_from_object), model, intr),
                None => FrameLabels::invalid("frame has no camera pose"),
            };
            FrameRecord { labels: Some(labels), ..f.clone() }
        })
        .collect())
}

/// Camera poses of every frame that has one, keyed by frame id.
pub fn camera_poses(session: &Session) -> HashMap<String, RigidTransform> {
    session.frames.iter().filter_map(|f| f.camera_pose_in_marker.map(|p| (f.frame_id.clone(), p))).collect()
}

/// Pixel of every labeled keypoint, by id.
pub fn keypoint_pixels(labels: &FrameLabels) -> HashMap<&str, Pixel> {
    labels.keypoints.iter().map(|k| (k.keypoint_id.as_str(), k.pixel)).collect()
}
