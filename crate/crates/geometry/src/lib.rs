//! Geometry plumbing for neural signed distance fields: mesh and point-cloud
//! IO, normalization, surface sampling, marching cubes and surface metrics.

pub mod cloud;
pub mod error;
pub mod io;
pub mod marching_cubes;
mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod normalize;
pub mod obj;
pub mod ply;
pub mod sampling;

pub use cloud::{load_cloud, save_cloud, OrientedPointCloud, UNIT_NORMAL_TOLERANCE};
pub use error::{GeometryError, Location, Result};
pub use io::{load_mesh, save_mesh, MeshFormat};
pub use marching_cubes::{cube_nodes, marching_cubes, ScalarGrid};
pub use mesh::TriangleMesh;
pub use metrics::{chamfer_metrics, chamfer_metrics_with, nearest_neighbors, CosineMode, MetricsReport, SpatialHash};
pub use normalize::{normalize_mesh, NormalizeTransform, NORMALIZED_HALF_EXTENT};
pub use sampling::{sample_surface, sample_surface_indexed, NormalSource};
