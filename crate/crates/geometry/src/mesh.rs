//! Indexed triangle meshes.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{GeometryError, Result};

/// Indexed triangle soup with optional per-vertex normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriangleMesh {
            vertices,
            triangles,
            normals: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Checks that every triangle references existing vertices and that the
    /// normal array, if present, matches the vertex count.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(GeometryError::Validation(format!(
                    "triangle {t} references vertex {bad} but mesh has {n} vertices"
                )));
            }
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(GeometryError::Validation(format!(
                    "{} normals for {n} vertices",
                    normals.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized face normal; its length is twice the triangle area.
    pub fn face_cross(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.face_cross(t).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Unit face normal following the counter-clockwise winding, or `None`
    /// for a zero-area triangle.
    pub fn face_normal(&self, t: usize) -> Option<Vector3<f64>> {
        let c = self.face_cross(t);
        let n = c.norm();
        (n > 0.0).then(|| c / n)
    }

    /// Axis-aligned bounds `(min, max)`, or `None` when there are no vertices.
    pub fn bounding_box(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Removes zero-area triangles and returns how many were dropped.
    pub fn drop_degenerate(&mut self) -> usize {
        let before = self.triangles.len();
        let keep: Vec<bool> = (0..before).map(|t| self.triangle_area(t) > 0.0).collect();
        let mut i = 0;
        self.triangles.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        before - self.triangles.len()
    }

    /// Merges vertices closer than `tolerance` (quantized to a grid of that
    /// pitch, then compared exactly within neighbouring buckets).
    pub fn weld(&self, tolerance: f64) -> TriangleMesh {
        let tol = tolerance.max(f64::MIN_POSITIVE);
        let key = |v: &Vector3<f64>| {
            [
                (v.x / tol).floor() as i64,
                (v.y / tol).floor() as i64,
                (v.z / tol).floor() as i64,
            ]
        };
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut remap = Vec::with_capacity(self.vertices.len());
        let mut vertices: Vec<Vector3<f64>> = Vec::new();
        let mut normals: Vec<Vector3<f64>> = Vec::new();
        for (i, v) in self.vertices.iter().enumerate() {
            let k = key(v);
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            if let Some(&j) = list.iter().find(|&&j| (vertices[j] - v).norm() <= tol) {
                                found = Some(j);
                                break 'search;
                            }
                        }
                    }
                }
            }
            let idx = match found {
                Some(j) => j,
                None => {
                    vertices.push(*v);
                    if let Some(ns) = &self.normals {
                        normals.push(ns[i]);
                    }
                    buckets.entry(k).or_default().push(vertices.len() - 1);
                    vertices.len() - 1
                }
            };
            remap.push(idx);
        }
        let triangles = self
            .triangles
            .iter()
            .map(|t| [remap[t[0]], remap[t[1]], remap[t[2]]])
            .filter(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2])
            .collect();
        TriangleMesh {
            vertices,
            triangles,
            normals: self.normals.as_ref().map(|_| normals),
        }
    }

    /// Number of undirected edges not shared by exactly two triangles. Zero
    /// for a closed manifold surface (after welding).
    pub fn open_edge_count(&self) -> usize {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().filter(|&&c| c != 2).count()
    }

    /// Area-weighted vertex normals derived from the faces.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            let c = self.face_cross(t);
            for &i in tri {
                acc[i] += c;
            }
        }
        for n in &mut acc {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        self.normals = Some(acc);
    }
}
