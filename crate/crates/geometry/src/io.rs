//! File-level mesh loading and saving.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{GeometryError, Result};
use crate::mesh::TriangleMesh;
use crate::obj::{read_obj, write_obj};
use crate::ply::{read_ply, write_ply, Element, PlyDocument, PlyEncoding, ScalarType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(GeometryError::Unsupported(format!(
                "cannot infer mesh format from '{}' (expected .obj or .ply)",
                path.display()
            ))),
        }
    }
}

pub fn load_mesh(path: &Path, format: Option<MeshFormat>) -> Result<TriangleMesh> {
    let format = match format {
        Some(f) => f,
        None => MeshFormat::from_path(path)?,
    };
    let bytes = fs::read(path).map_err(|e| GeometryError::io(path, e))?;
    let src = path.display().to_string();
    let mesh = match format {
        MeshFormat::Obj => {
            let text = String::from_utf8_lossy(&bytes);
            read_obj(&text, &src)?
        }
        MeshFormat::Ply => mesh_from_ply(&read_ply(&bytes, &src)?, &src)?,
    };
    mesh.validate()?;
    Ok(mesh)
}

pub fn save_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GeometryError::io(path, e))?;
    let mut w = BufWriter::new(file);
    match MeshFormat::from_path(path)? {
        MeshFormat::Obj => write_obj(mesh, &mut w),
        MeshFormat::Ply => write_ply(&mesh_to_ply(mesh, PlyEncoding::BinaryLittleEndian), &mut w),
    }
    .map_err(|e| GeometryError::io(path, e))
}

pub fn mesh_from_ply(doc: &PlyDocument, src: &str) -> Result<TriangleMesh> {
    let missing = |what: &str| GeometryError::Validation(format!("{src}: PLY has no {what}"));
    let vertex = doc.element("vertex").ok_or_else(|| missing("vertex element"))?;
    let coord = |name: &str| vertex.scalar(name).ok_or_else(|| missing(&format!("vertex property '{name}'")));
    let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
    let vertices: Vec<_> = (0..vertex.count).map(|i| Vector3::new(x[i], y[i], z[i])).collect();
    let normals = match (vertex.scalar("nx"), vertex.scalar("ny"), vertex.scalar("nz")) {
        (Some(nx), Some(ny), Some(nz)) => Some((0..vertex.count).map(|i| Vector3::new(nx[i], ny[i], nz[i])).collect()),
        _ => None,
    };
    let mut triangles = Vec::new();
    if let Some(face) = doc.element("face") {
        let lists = face
            .list("vertex_indices")
            .or_else(|| face.list("vertex_index"))
            .ok_or_else(|| missing("face property 'vertex_indices'"))?;
        for (f, poly) in lists.iter().enumerate() {
            if poly.len() < 3 {
                return Err(GeometryError::Validation(format!("{src}: face {f} has fewer than three vertices")));
            }
            let idx: Vec<usize> = poly
                .iter()
                .map(|&v| {
                    if v < 0.0 || v as usize >= vertices.len() {
                        Err(GeometryError::Validation(format!(
                            "{src}: face {f} index {v} out of range ({} vertices)",
                            vertices.len()
                        )))
                    } else {
                        Ok(v as usize)
                    }
                })
                .collect::<Result<_>>()?;
            for k in 1..idx.len() - 1 {
                triangles.push([idx[0], idx[k], idx[k + 1]]);
            }
        }
    }
    Ok(TriangleMesh {
        vertices,
        triangles,
        normals,
    })
}

pub fn mesh_to_ply(mesh: &TriangleMesh, encoding: PlyEncoding) -> PlyDocument {
    let col = |f: fn(&Vector3<f64>) -> f64, vs: &[Vector3<f64>]| vs.iter().map(f).collect::<Vec<_>>();
    let mut vertex = Element::new("vertex", mesh.vertices.len())
        .with_scalar("x", ScalarType::F32, col(|v| v.x, &mesh.vertices))
        .with_scalar("y", ScalarType::F32, col(|v| v.y, &mesh.vertices))
        .with_scalar("z", ScalarType::F32, col(|v| v.z, &mesh.vertices));
    if let Some(ns) = &mesh.normals {
        vertex = vertex
            .with_scalar("nx", ScalarType::F32, col(|v| v.x, ns))
            .with_scalar("ny", ScalarType::F32, col(|v| v.y, ns))
            .with_scalar("nz", ScalarType::F32, col(|v| v.z, ns));
    }
    let faces = mesh
        .triangles
        .iter()
        .map(|t| t.iter().map(|&i| i as f64).collect())
        .collect();
    let face = Element::new("face", mesh.triangles.len()).with_list("vertex_indices", ScalarType::U8, ScalarType::I32, faces);
    PlyDocument {
        encoding,
        comments: Vec::new(),
        elements: vec![vertex, face],
    }
}
