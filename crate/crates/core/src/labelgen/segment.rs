//! Foreground masks from the projected model hull.

use image::{Rgba, RgbaImage};

use crate::error::{Error, Result};
use crate::geom::{project, CameraIntrinsics, Pixel, RigidTransform};
use crate::model::ObjectModel;

fn cross(o: &Pixel, a: &Pixel, b: &Pixel) -> f64 {
    (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u)
}

/// Andrew's monotone chain. Counter-clockwise in `(u, v)` axes, collinear
/// points dropped. Fewer than three vertices means a degenerate hull.
pub fn convex_hull(points: &[Pixel]) -> Vec<Pixel> {
    let mut pts: Vec<Pixel> = points.to_vec();
    pts.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.v.total_cmp(&b.v)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Pixel> = Vec::with_capacity(2 * pts.len());
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Sutherland-Hodgman clip of a convex polygon to `[x0, x1] × [y0, y1]`.
pub fn clip_to_rect(poly: &[Pixel], x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Pixel> {
    if poly.len() < 3 {
        return poly.iter().map(|p| Pixel::new(p.u.clamp(x0, x1), p.v.clamp(y0, y1))).collect();
    }
    // (axis, bound, keep_below)
    let planes = [(0, x0, false), (0, x1, true), (1, y0, false), (1, y1, true)];
    let coord = |p: &Pixel, axis: usize| if axis == 0 { p.u } else { p.v };
    let mut out = poly.to_vec();
    for (axis, bound, below) in planes {
        let inside = |p: &Pixel| {
            if below {
                coord(p, axis) <= bound
            } else {
                coord(p, axis) >= bound
            }
        };
        let input = std::mem::take(&mut out);
        for (i, cur) in input.iter().enumerate() {
            let prev = &input[(i + input.len() - 1) % input.len()];
            let cross_at = || {
                let t = (bound - coord(prev, axis)) / (coord(cur, axis) - coord(prev, axis));
                let mut q = Pixel::new(prev.u + t * (cur.u - prev.u), prev.v + t * (cur.v - prev.v));
                if axis == 0 {
                    q.u = bound;
                } else {
                    q.v = bound;
                }
                q
            };
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(*cur),
                (true, false) => out.push(cross_at()),
                (false, true) => {
                    out.push(cross_at());
                    out.push(*cur);
                }
                (false, false) => {}
            }
        }
        if out.is_empty() {
            break;
        }
    }
    out.dedup();
    out
}

/// Binary mask over an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![false; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32) {
        self.data[y as usize * self.width as usize + x as usize] = true;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Inclusive `(x0, y0, x1, y1)` of the set pixels.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width, self.height, |x, y| image::Luma([if self.get(x, y) { 255 } else { 0 }]))
    }
}

fn pixel_index(p: &Pixel, width: u32, height: u32) -> Option<(u32, u32)> {
    let (x, y) = (p.u.round(), p.v.round());
    (x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64).then_some((x as u32, y as u32))
}

/// Pixels whose centres lie inside the closed hull. A hull of one or two
/// vertices marks the pixels along it.
pub fn hull_mask(hull: &[Pixel], width: u32, height: u32) -> Mask {
    let mut mask = Mask::new(width, height);
    if hull.len() < 3 {
        let (a, b) = match hull {
            [] => return mask,
            [a] => (*a, *a),
            [a, b, ..] => (*a, *b),
        };
        let steps = (a.distance(&b) * 4.0).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let p = Pixel::new(a.u + t * (b.u - a.u), a.v + t * (b.v - a.v));
            if let Some((x, y)) = pixel_index(&p, width, height) {
                mask.set(x, y);
            }
        }
        return mask;
    }
    let eps = 1e-9;
    let umin = hull.iter().map(|p| p.u).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let umax = hull.iter().map(|p| p.u).fold(f64::NEG_INFINITY, f64::max).floor();
    let vmin = hull.iter().map(|p| p.v).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let vmax = hull.iter().map(|p| p.v).fold(f64::NEG_INFINITY, f64::max).floor();
    let umax = umax.min(width as f64 - 1.0);
    let vmax = vmax.min(height as f64 - 1.0);
    if umin > umax || vmin > vmax {
        return mask;
    }
    for y in vmin as u32..=vmax as u32 {
        for x in umin as u32..=umax as u32 {
            let p = Pixel::new(x as f64, y as f64);
            let inside = (0..hull.len()).all(|i| cross(&hull[i], &hull[(i + 1) % hull.len()], &p) >= -eps);
            if inside {
                mask.set(x, y);
            }
        }
    }
    mask
}

#[derive(Debug, Clone)]
pub struct Foreground {
    /// Full-frame mask.
    pub mask: Mask,
    /// Projected hull in full-frame pixels.
    pub hull: Vec<Pixel>,
    /// The hull has fewer than three vertices.
    pub degenerate: bool,
    /// Crop of the image to the mask bounds; alpha is zero outside the mask.
    pub patch: RgbaImage,
    /// Full-frame pixel of the patch's `(0, 0)`.
    pub origin: (u32, u32),
}

/// Cuts the object out of `image` using the convex hull of the projected mesh.
pub fn segment_foreground(
    image: &RgbaImage,
    camera_from_object: &RigidTransform,
    model: &ObjectModel,
    intr: &CameraIntrinsics,
) -> Result<Foreground> {
    if image.dimensions() != (intr.width(), intr.height()) {
        return Err(Error::invalid(
            "image",
            format!(
                "image is {}×{}, intrinsics expect {}×{}",
                image.width(),
                image.height(),
                intr.width(),
                intr.height()
            ),
        ));
    }
    let mut px = Vec::new();
    for p in model.outline_points() {
        let c = camera_from_object.transform_point(&p);
        if !(c.z > 0.0) {
            return Err(Error::BehindCamera { z: c.z });
        }
        px.push(project(intr, &c)?);
    }
    let hull = convex_hull(&px);
    let mask = hull_mask(&hull, image.width(), image.height());
    let (x0, y0, x1, y1) = mask.bounds().ok_or_else(|| Error::invalid("pose", "object projects outside the image"))?;
    let patch = RgbaImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| {
        let (gx, gy) = (x + x0, y + y0);
        if mask.get(gx, gy) {
            *image.get_pixel(gx, gy)
        } else {
            Rgba([0, 0, 0, 0])
        }
    });
    Ok(Foreground { degenerate: hull.len() < 3, mask, hull, patch, origin: (x0, y0) })
}
