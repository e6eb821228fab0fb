//! Mapping meshes into the canonical training domain.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};
use crate::mesh::TriangleMesh;

/// Half-extent of the longest bounding-box axis after normalization.
pub const NORMALIZED_HALF_EXTENT: f64 = 0.9;

/// Uniform scale about a center: `x' = scale · (x − center)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeTransform {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormalizeTransform {
    pub fn identity() -> Self {
        NormalizeTransform {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - Vector3::from(self.center)) * self.scale
    }

    pub fn inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p / self.scale + Vector3::from(self.center)
    }

    pub fn inverse_mesh(&self, mesh: &TriangleMesh) -> TriangleMesh {
        TriangleMesh {
            vertices: mesh.vertices.iter().map(|v| self.inverse(v)).collect(),
            triangles: mesh.triangles.clone(),
            normals: mesh.normals.clone(),
        }
    }
}

/// Centers the bounding box at the origin and scales uniformly so the
/// longest half-extent becomes [`NORMALIZED_HALF_EXTENT`].
pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<(TriangleMesh, NormalizeTransform)> {
    let (lo, hi) = mesh
        .bounding_box()
        .ok_or_else(|| GeometryError::Degenerate("mesh has no vertices".into()))?;
    let half = (hi - lo).max() / 2.0;
    if !(half > 0.0) || !half.is_finite() {
        return Err(GeometryError::Degenerate(format!(
            "bounding box has zero extent (half extent {half})"
        )));
    }
    let center = (lo + hi) / 2.0;
    let t = NormalizeTransform {
        center: center.into(),
        scale: NORMALIZED_HALF_EXTENT / half,
    };
    let out = TriangleMesh {
        vertices: mesh.vertices.iter().map(|v| t.apply(v)).collect(),
        triangles: mesh.triangles.clone(),
        normals: mesh.normals.clone(),
    };
    Ok((out, t))
}
