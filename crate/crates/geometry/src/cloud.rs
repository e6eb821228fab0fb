//! Oriented point clouds and their PLY persistence.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{GeometryError, Result};
use crate::ply::{read_ply, write_ply, Element, PlyDocument, PlyEncoding, ScalarType};

/// Tolerance on `|‖n‖ − 1|` for a normal to count as unit length.
pub const UNIT_NORMAL_TOLERANCE: f64 = 1e-6;

/// Surface samples `(p_i, n_i)` with unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl OrientedPointCloud {
    pub fn new(points: Vec<Vector3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        let cloud = OrientedPointCloud { points, normals };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.normals.len() {
            return Err(GeometryError::Validation(format!(
                "{} points but {} normals",
                self.points.len(),
                self.normals.len()
            )));
        }
        if let Some(i) = self
            .normals
            .iter()
            .position(|n| !((n.norm() - 1.0).abs() <= UNIT_NORMAL_TOLERANCE))
        {
            return Err(GeometryError::Validation(format!(
                "normal {i} has length {} (expected unit length)",
                self.normals[i].norm()
            )));
        }
        Ok(())
    }

    /// True when every point lies in the closed box `[-bound, bound]^3`.
    pub fn within(&self, bound: f64) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.abs() <= bound))
    }

    pub fn select(&self, indices: &[usize]) -> OrientedPointCloud {
        OrientedPointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
        }
    }

    pub fn to_ply(&self) -> PlyDocument {
        let col = |vs: &[Vector3<f64>], k: usize| vs.iter().map(|v| v[k]).collect::<Vec<_>>();
        let vertex = Element::new("vertex", self.len())
            .with_scalar("x", ScalarType::F64, col(&self.points, 0))
            .with_scalar("y", ScalarType::F64, col(&self.points, 1))
            .with_scalar("z", ScalarType::F64, col(&self.points, 2))
            .with_scalar("nx", ScalarType::F64, col(&self.normals, 0))
            .with_scalar("ny", ScalarType::F64, col(&self.normals, 1))
            .with_scalar("nz", ScalarType::F64, col(&self.normals, 2));
        PlyDocument {
            encoding: PlyEncoding::BinaryLittleEndian,
            comments: vec!["oriented point cloud".to_string()],
            elements: vec![vertex],
        }
    }

    pub fn from_ply(doc: &PlyDocument, src: &str) -> Result<Self> {
        let vertex = doc
            .element("vertex")
            .ok_or_else(|| GeometryError::Validation(format!("{src}: PLY has no vertex element")))?;
        let get = |name: &str| {
            vertex
                .scalar(name)
                .ok_or_else(|| GeometryError::Validation(format!("{src}: cloud is missing property '{name}'")))
        };
        let [x, y, z, nx, ny, nz] = ["x", "y", "z", "nx", "ny", "nz"].map(get);
        let (x, y, z, nx, ny, nz) = (x?, y?, z?, nx?, ny?, nz?);
        let n = vertex.count;
        OrientedPointCloud::new(
            (0..n).map(|i| Vector3::new(x[i], y[i], z[i])).collect(),
            (0..n).map(|i| Vector3::new(nx[i], ny[i], nz[i])).collect(),
        )
    }
}

/// Writes the cloud as binary little-endian PLY with `double` x,y,z,nx,ny,nz.
pub fn save_cloud(path: &Path, cloud: &OrientedPointCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GeometryError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply(&cloud.to_ply(), &mut w).map_err(|e| GeometryError::io(path, e))
}

pub fn load_cloud(path: &Path) -> Result<OrientedPointCloud> {
    let bytes = fs::read(path).map_err(|e| GeometryError::io(path, e))?;
    let src = path.display().to_string();
    OrientedPointCloud::from_ply(&read_ply(&bytes, &src)?, &src)
}
