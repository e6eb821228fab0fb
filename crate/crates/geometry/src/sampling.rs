//! Area-weighted oriented surface sampling.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::OrientedPointCloud;
use crate::error::{GeometryError, Result};
use crate::mesh::TriangleMesh;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalSource {
    /// Geometric normal of the sampled triangle.
    #[default]
    Face,
    /// Barycentric interpolation of the mesh's per-vertex normals.
    Vertex,
}

/// Samples `count` points with probability proportional to triangle area.
/// Output is identical for a given seed regardless of thread count.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64, normals: NormalSource) -> Result<OrientedPointCloud> {
    sample_surface_indexed(mesh, count, seed, normals).map(|(cloud, _)| cloud)
}

/// Like [`sample_surface`], also returning the source triangle of each sample.
pub fn sample_surface_indexed(
    mesh: &TriangleMesh,
    count: usize,
    seed: u64,
    normals: NormalSource,
) -> Result<(OrientedPointCloud, Vec<usize>)> {
    mesh.validate()?;
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(GeometryError::Degenerate("mesh has zero surface area".into()));
    }
    if normals == NormalSource::Vertex && mesh.normals.is_none() {
        return Err(GeometryError::Validation("vertex normals requested but mesh has none".into()));
    }

    let chunks: Vec<(usize, usize)> = (0..count.div_ceil(CHUNK))
        .map(|c| (c, CHUNK.min(count - c * CHUNK)))
        .collect();
    let parts: Vec<Vec<(Vector3<f64>, Vector3<f64>, usize)>> = chunks
        .par_iter()
        .map(|&(c, n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64 + 1);
            (0..n)
                .map(|_| {
                    let u = rng.random::<f64>() * total;
                    let t = cumulative.partition_point(|&a| a <= u).min(cumulative.len() - 1);
                    let (p, n) = sample_triangle(mesh, t, rng.random(), rng.random(), normals);
                    (p, n, t)
                })
                .collect()
        })
        .collect();

    let mut points = Vec::with_capacity(count);
    let mut nrm = Vec::with_capacity(count);
    let mut tris = Vec::with_capacity(count);
    for (p, n, t) in parts.into_iter().flatten() {
        points.push(p);
        nrm.push(n);
        tris.push(t);
    }
    Ok((OrientedPointCloud { points, normals: nrm }, tris))
}

fn sample_triangle(mesh: &TriangleMesh, t: usize, r1: f64, r2: f64, source: NormalSource) -> (Vector3<f64>, Vector3<f64>) {
    let [a, b, c] = mesh.corners(t);
    let s = r1.sqrt();
    let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
    let p = a * wa + b * wb + c * wc;
    // zero-area triangles have zero selection probability
    let face = mesh.face_normal(t).unwrap_or(Vector3::z());
    let n = match (source, &mesh.normals) {
        (NormalSource::Vertex, Some(ns)) => {
            let [ia, ib, ic] = mesh.triangles[t];
            let v = ns[ia] * wa + ns[ib] * wb + ns[ic] * wc;
            let len = v.norm();
            if len > 0.0 {
                v / len
            } else {
                face
            }
        }
        _ => face,
    };
    (p, n)
}
