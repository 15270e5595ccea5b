//! Minimal z-buffer rasterizer for triangle meshes.
//!
//! Pixel centres sit at integer coordinates. Depth is interpolated
//! perspective-correctly (`1/z` is affine in screen space). Triangles with a
//! vertex at or behind the camera plane are skipped rather than clipped.

use crate::geom::{CameraIntrinsics, Pixel, RigidTransform, Vec3};
use crate::model::ObjectModel;

const NEAR: f64 = 1e-6;

pub const NO_FACE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct DepthBuffer {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    face: Vec<u32>,
}

impl DepthBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, depth: vec![f64::INFINITY; n], face: vec![NO_FACE; n] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Depth at integer pixel `(x, y)`; `INFINITY` where nothing was drawn.
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.depth[(y * self.width + x) as usize]
    }

    pub fn face_at(&self, x: u32, y: u32) -> Option<usize> {
        let f = self.face[(y * self.width + x) as usize];
        (f != NO_FACE).then_some(f as usize)
    }

    /// Depth at the pixel whose centre is nearest `p`; `None` outside the image.
    pub fn depth_at(&self, p: Pixel) -> Option<f64> {
        let x = p.u.round();
        let y = p.v.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.get(x as u32, y as u32))
    }

    /// Draws one camera-frame triangle.
    pub fn draw_triangle(&mut self, intr: &CameraIntrinsics, tri: &[Vec3; 3], face_id: u32) {
        if tri.iter().any(|v| v.z <= NEAR) {
            return;
        }
        let p: Vec<(f64, f64)> =
            tri.iter().map(|v| (intr.px() + intr.fx() * v.x / v.z, intr.py() + intr.fy() * v.y / v.z)).collect();
        let area = edge(p[0], p[1], p[2]);
        if area == 0.0 || !area.is_finite() {
            return;
        }
        let min_u = p.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_u = p.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).floor().min(self.width as f64 - 1.0);
        let min_v = p.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).ceil().max(0.0);
        let max_v = p.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).floor().min(self.height as f64 - 1.0);
        if min_u > max_u || min_v > max_v {
            return;
        }
        let inv_z = [1.0 / tri[0].z, 1.0 / tri[1].z, 1.0 / tri[2].z];
        for y in min_v as u32..=max_v as u32 {
            for x in min_u as u32..=max_u as u32 {
                let q = (x as f64, y as f64);
                let w0 = edge(p[1], p[2], q) / area;
                let w1 = edge(p[2], p[0], q) / area;
                let w2 = edge(p[0], p[1], q) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]);
                let idx = (y * self.width + x) as usize;
                if z < self.depth[idx] {
                    self.depth[idx] = z;
                    self.face[idx] = face_id;
                }
            }
        }
    }
}

fn edge(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Renders the model's mesh at `camera_from_object` into a full-frame buffer.
pub fn render_depth(camera_from_object: &RigidTransform, model: &ObjectModel, intr: &CameraIntrinsics) -> DepthBuffer {
    let mut buf = DepthBuffer::new(intr.width(), intr.height());
    let verts: Vec<Vec3> = model.mesh_vertices.iter().map(|v| camera_from_object.transform_point(v)).collect();
    for (i, f) in model.mesh_faces.iter().enumerate() {
        buf.draw_triangle(intr, &[verts[f[0]], verts[f[1]], verts[f[2]]], i as u32);
    }
    buf
}
