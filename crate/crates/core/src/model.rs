//! Object models and point clouds.

use std::collections::HashSet;
use std::fmt;
use std::num::NonZeroUsize;
use std::sync::OnceLock;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelKeypoint {
    pub id: String,
    pub position: Vec3,
}

/// Named keypoints and a triangle mesh, all in the object frame (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectModel {
    pub keypoints: Vec<ModelKeypoint>,
    pub mesh_vertices: Vec<Vec3>,
    pub mesh_faces: Vec<[usize; 3]>,
}

impl ObjectModel {
    pub const MIN_KEYPOINTS: usize = 4;

    pub fn new(keypoints: Vec<ModelKeypoint>, mesh_vertices: Vec<Vec3>, mesh_faces: Vec<[usize; 3]>) -> Result<Self> {
        let model = Self { keypoints, mesh_vertices, mesh_faces };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints.len() < Self::MIN_KEYPOINTS {
            return Err(Error::invalid(
                "model.keypoints",
                format!("{} keypoints given, at least {} required", self.keypoints.len(), Self::MIN_KEYPOINTS),
            ));
        }
        let mut seen = HashSet::new();
        for (i, k) in self.keypoints.iter().enumerate() {
            if !seen.insert(k.id.as_str()) {
                return Err(Error::invalid(format!("model.keypoints[{i}].id"), format!("duplicate id `{}`", k.id)));
            }
            if !k.position.iter().all(|c| c.is_finite()) {
                return Err(Error::invalid(format!("model.keypoints[{i}].position"), "must be finite"));
            }
        }
        if !self.mesh_vertices.iter().all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("model.mesh_vertices", "must be finite"));
        }
        let n = self.mesh_vertices.len();
        for (i, f) in self.mesh_faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::invalid(format!("model.mesh_faces[{i}]"), "vertex index out of range"));
            }
        }
        Ok(())
    }

    pub fn keypoint(&self, id: &str) -> Option<&Vec3> {
        self.keypoints.iter().find(|k| k.id == id).map(|k| &k.position)
    }

    pub fn keypoint_ids(&self) -> impl Iterator<Item = &str> {
        self.keypoints.iter().map(|k| k.id.as_str())
    }

    /// Mesh vertices, or the keypoints when the model carries no mesh.
    pub fn outline_points(&self) -> Vec<Vec3> {
        if self.mesh_vertices.is_empty() {
            self.keypoints.iter().map(|k| k.position).collect()
        } else {
            self.mesh_vertices.clone()
        }
    }

    pub fn triangles(&self) -> impl Iterator<Item = [Vec3; 3]> + '_ {
        self.mesh_faces.iter().map(|f| [self.mesh_vertices[f[0]], self.mesh_vertices[f[1]], self.mesh_vertices[f[2]]])
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles().map(|[a, b, c]| 0.5 * (b - a).cross(&(c - a)).norm()).sum()
    }
}

/// Finite 3D points with a k-d tree built on first query.
pub struct PointCloud {
    points: Vec<Vec3>,
    index: OnceLock<ImmutableKdTree<f64, 3>>,
    spacing: OnceLock<f64>,
}

impl Clone for PointCloud {
    fn clone(&self) -> Self {
        Self::from_points_unchecked(self.points.clone())
    }
}

impl fmt::Debug for PointCloud {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PointCloud").field("len", &self.points.len()).finish()
    }
}

impl PartialEq for PointCloud {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("cloud.points[{i}]"), "must be finite"));
        }
        Ok(Self::from_points_unchecked(points))
    }

    fn from_points_unchecked(points: Vec<Vec3>) -> Self {
        Self { points, index: OnceLock::new(), spacing: OnceLock::new() }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        Self::from_points_unchecked(self.points.iter().map(|p| t.transform_point(p)).collect())
    }

    fn index(&self) -> &ImmutableKdTree<f64, 3> {
        self.index.get_or_init(|| {
            let raw: Vec<[f64; 3]> = self.points.iter().map(|p| [p.x, p.y, p.z]).collect();
            ImmutableKdTree::new_from_slice(&raw).expect("finite points always build a tree")
        })
    }

    /// Nearest cloud point to `q`: `(index, distance)`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let hit = self.index().query(&[q.x, q.y, q.z]).nearest_one::<SquaredEuclidean<f64>>().execute();
        Some((hit.item as usize, hit.distance.sqrt()))
    }

    /// Indices of all points within `radius` of `q`, unordered.
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        if self.points.is_empty() {
            return Vec::new();
        }
        self.index()
            .query(&[q.x, q.y, q.z])
            .within::<SquaredEuclidean<f64>>(radius * radius)
            .unsorted()
            .execute()
            .into_iter()
            .map(|r| r.item as usize)
            .collect()
    }

    /// Median distance from each point to its nearest neighbour.
    pub fn median_spacing(&self) -> f64 {
        *self.spacing.get_or_init(|| {
            if self.points.len() < 2 {
                return 0.0;
            }
            let two = NonZeroUsize::new(2).unwrap();
            let tree = self.index();
            let mut d: Vec<f64> = self
                .points
                .iter()
                .map(|p| {
                    tree.query(&[p.x, p.y, p.z])
                        .nearest_n::<SquaredEuclidean<f64>>(two)
                        .execute()
                        .get(1)
                        .map_or(0.0, |r| r.distance.sqrt())
                })
                .collect();
            let mid = d.len() / 2;
            d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            d[mid]
        })
    }
}
