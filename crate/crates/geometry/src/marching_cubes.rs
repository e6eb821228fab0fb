//! Iso-surface extraction from regular scalar grids.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{GeometryError, Result};
use crate::mc_tables::{CORNERS, EDGES, TRIANGLES};
use crate::mesh::TriangleMesh;

/// Scalar samples on a regular lattice, stored x-fastest:
/// `values[i + nx * (j + ny * k)]` is the sample at `origin + spacing * (i, j, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], spacing: f64, values: Vec<f64>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if values.len() != expected {
            return Err(GeometryError::Validation(format!(
                "grid of {dims:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if !(spacing > 0.0) {
            return Err(GeometryError::Validation(format!("grid spacing must be positive, got {spacing}")));
        }
        Ok(ScalarGrid {
            dims,
            origin,
            spacing,
            values,
        })
    }

    /// Cubic grid with `resolution` nodes per axis spanning `[lo, hi]^3`.
    pub fn cube(resolution: usize, lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 {
            return Err(GeometryError::Validation(format!("resolution must be at least 2, got {resolution}")));
        }
        ScalarGrid::new([resolution; 3], [lo; 3], (hi - lo) / (resolution - 1) as f64, values)
    }

    /// Samples `f` at every node, x-fastest.
    pub fn from_fn(resolution: usize, lo: f64, hi: f64, f: impl Fn(Vector3<f64>) -> f64 + Sync) -> Result<Self> {
        let nodes = cube_nodes(resolution, lo, hi);
        let values = nodes.par_iter().map(|p| f(*p)).collect();
        ScalarGrid::cube(resolution, lo, hi, values)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + self.spacing * i as f64,
            self.origin[1] + self.spacing * j as f64,
            self.origin[2] + self.spacing * k as f64,
        )
    }

    pub fn cell_diagonal(&self) -> f64 {
        self.spacing * 3f64.sqrt()
    }
}

/// Node coordinates of a cubic lattice over `[lo, hi]^3`, x-fastest.
pub fn cube_nodes(resolution: usize, lo: f64, hi: f64) -> Vec<Vector3<f64>> {
    let step = if resolution > 1 { (hi - lo) / (resolution - 1) as f64 } else { 0.0 };
    let coord = |i: usize| lo + step * i as f64;
    let mut out = Vec::with_capacity(resolution.pow(3));
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                out.push(Vector3::new(coord(i), coord(j), coord(k)));
            }
        }
    }
    out
}

/// Triangulates the `iso` level set with the 256-case table and linear edge
/// interpolation. Triangles are wound so that face normals point toward
/// increasing values (outward for a signed distance that is negative
/// inside). Vertices are not shared between triangles; see
/// [`TriangleMesh::weld`].
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return TriangleMesh::default();
    }
    let slabs: Vec<Vec<[Vector3<f64>; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|k| {
            let mut tris = Vec::new();
            for j in 0..ny - 1 {
                for i in 0..nx - 1 {
                    polygonise_cell(grid, iso, [i, j, k], &mut tris);
                }
            }
            tris
        })
        .collect();
    let mut mesh = TriangleMesh::default();
    for tri in slabs.into_iter().flatten() {
        let base = mesh.vertices.len();
        mesh.vertices.extend(tri);
        mesh.triangles.push([base, base + 1, base + 2]);
    }
    mesh
}

fn polygonise_cell(grid: &ScalarGrid, iso: f64, cell: [usize; 3], out: &mut Vec<[Vector3<f64>; 3]>) {
    let mut values = [0.0; 8];
    let mut case = 0usize;
    for (c, off) in CORNERS.iter().enumerate() {
        values[c] = grid.value(cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]);
        if values[c] < iso {
            case |= 1 << c;
        }
    }
    if case == 0 || case == 255 {
        return;
    }
    let corner_pos = |c: usize| grid.node_position(cell[0] + CORNERS[c][0], cell[1] + CORNERS[c][1], cell[2] + CORNERS[c][2]);
    let edge_vertex = |e: usize| {
        let [a, b] = EDGES[e];
        let (va, vb) = (values[a], values[b]);
        let denom = vb - va;
        let t = if denom.abs() > f64::EPSILON * (va.abs() + vb.abs()).max(1e-300) {
            ((iso - va) / denom).clamp(0.0, 1.0)
        } else {
            0.5
        };
        corner_pos(a) + (corner_pos(b) - corner_pos(a)) * t
    };
    let row = &TRIANGLES[case];
    for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
        // table winding is clockwise seen from outside; emit reversed
        out.push([edge_vertex(tri[0] as usize), edge_vertex(tri[2] as usize), edge_vertex(tri[1] as usize)]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_matches_sign_changes() {
        for case in 0..256usize {
            let mut crossed = [false; 12];
            for (e, [a, b]) in EDGES.iter().enumerate() {
                crossed[e] = ((case >> a) & 1) != ((case >> b) & 1);
            }
            let mut used = [false; 12];
            for &e in TRIANGLES[case].iter().take_while(|&&e| e >= 0) {
                used[e as usize] = true;
            }
            assert_eq!(used, crossed, "case {case}");
            assert_eq!(TRIANGLES[case].iter().take_while(|&&e| e >= 0).count() % 3, 0);
        }
    }

    #[test]
    fn all_positive_is_empty() {
        let g = ScalarGrid::from_fn(5, -1.0, 1.0, |_| 1.0).unwrap();
        assert!(marching_cubes(&g, 0.0).is_empty());
    }

    #[test]
    fn single_negative_corner_is_one_triangle() {
        let mut values = vec![1.0; 8];
        values[0] = -1.0;
        let g = ScalarGrid::cube(2, 0.0, 1.0, values).unwrap();
        let m = marching_cubes(&g, 0.0);
        assert_eq!(m.triangles.len(), 1);
        for v in &m.vertices {
            // each vertex is the midpoint of an edge leaving the origin
            assert!((v.norm() - 0.5).abs() < 1e-15);
        }
        // oriented away from the negative corner
        assert!(m.face_normal(0).unwrap().dot(&Vector3::new(1.0, 1.0, 1.0)) > 0.0);
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let g = ScalarGrid::from_fn(24, -1.0, 1.0, |p| p.norm() - 0.6).unwrap();
        let m = marching_cubes(&g, 0.0);
        let welded = m.weld(1e-9);
        assert_eq!(welded.open_edge_count(), 0);
        for t in 0..m.triangles.len() {
            if let Some(n) = m.face_normal(t) {
                let c = m.corners(t);
                let centroid = (c[0] + c[1] + c[2]) / 3.0;
                assert!(n.dot(&centroid) > 0.0);
            }
        }
    }

    #[test]
    fn random_field_is_watertight() {
        // interior cells only: keep the surface away from the grid boundary
        let g = ScalarGrid::from_fn(20, -1.0, 1.0, |p| {
            let bump = (7.0 * p.x).sin() * (5.0 * p.y).cos() * (6.0 * p.z).sin() * 0.15;
            p.norm() - 0.55 + bump
        })
        .unwrap();
        let welded = marching_cubes(&g, 0.0).weld(1e-9);
        assert!(!welded.is_empty());
        assert_eq!(welded.open_edge_count(), 0);
    }
}
