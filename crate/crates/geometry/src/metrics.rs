//! Two-way point distance and normal cosine distance between sampled surfaces.

use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::OrientedPointCloud;
use crate::error::{GeometryError, Result};

/// How matched normals are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CosineMode {
    /// `1 − |cos|`, indifferent to orientation.
    #[default]
    Absolute,
    /// `1 − cos`, penalizing flipped normals.
    Signed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub point_to_point: f64,
    pub normal_cosine: f64,
    /// Sizes of the two input sets.
    pub n_samples: [usize; 2],
    pub seconds: f64,
}

/// Uniform bucket grid over a point set for exact nearest-neighbour queries.
pub struct SpatialHash<'a> {
    points: &'a [Vector3<f64>],
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> SpatialHash<'a> {
    /// Cell size is the typical spacing `(volume / n)^(1/3)` of the bounding box.
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        assert!(!points.is_empty(), "spatial hash over an empty set");
        let (lo, hi) = points
            .iter()
            .fold((points[0], points[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let extent = hi - lo;
        let longest = extent.max();
        let mut cell = if longest > 0.0 {
            // pad flat axes so the volume estimate stays meaningful
            let padded = extent.map(|e| e.max(longest * 1e-3));
            (padded.x * padded.y * padded.z / points.len() as f64).cbrt()
        } else {
            1.0
        };
        let dims_for = |cell: f64| extent.map(|e| (e / cell).floor() as usize + 1);
        while dims_for(cell).iter().product::<usize>() > 4 * points.len() + 64 {
            cell *= 1.5;
        }
        let d = dims_for(cell);
        let dims = [d.x, d.y, d.z];

        let mut hash = SpatialHash {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims.iter().product::<usize>();
        let keys: Vec<usize> = points.iter().map(|p| hash.flat(hash.cell_of(p))).collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        hash.starts = counts;
        hash.order = order;
        hash
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        let mut c = [0; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.cell).floor();
            c[k] = if f <= 0.0 { 0 } else { (f as usize).min(self.dims[k] - 1) };
        }
        c
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Index and distance of the closest point; ties go to the smallest index,
    /// so the result equals an exhaustive scan.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let c = self.cell_of(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let consider = |i: usize, best: &mut (usize, f64)| {
            let d = (self.points[i] - q).norm();
            if d < best.1 || (d == best.1 && i < best.0) {
                *best = (i, d);
            }
        };
        let mut r = 0usize;
        loop {
            let lo: [usize; 3] = std::array::from_fn(|k| c[k].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|k| (c[k] + r).min(self.dims[k] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = r == 0
                            || x.abs_diff(c[0]) == r
                            || y.abs_diff(c[1]) == r
                            || z.abs_diff(c[2]) == r;
                        if !on_shell {
                            continue;
                        }
                        let f = self.flat([x, y, z]);
                        for &i in &self.order[self.starts[f]..self.starts[f + 1]] {
                            consider(i, &mut best);
                        }
                    }
                }
            }
            // distance from q to the unexplored part of the grid
            let mut bound = f64::INFINITY;
            for k in 0..3 {
                if lo[k] > 0 {
                    let face = self.origin[k] + self.cell * lo[k] as f64;
                    bound = bound.min((q[k] - face).max(0.0));
                }
                if hi[k] + 1 < self.dims[k] {
                    let face = self.origin[k] + self.cell * (hi[k] + 1) as f64;
                    bound = bound.min((face - q[k]).max(0.0));
                }
            }
            if bound == f64::INFINITY || best.1 < bound {
                return best;
            }
            r += 1;
        }
    }
}

/// Nearest point of `targets` for every query, in query order.
pub fn nearest_neighbors(targets: &[Vector3<f64>], queries: &[Vector3<f64>]) -> Vec<(usize, f64)> {
    let hash = SpatialHash::new(targets);
    queries.par_iter().map(|q| hash.nearest(q)).collect()
}

/// Symmetric surface comparison: each metric is the average of the two
/// directional means.
pub fn chamfer_metrics(a: &OrientedPointCloud, b: &OrientedPointCloud) -> Result<MetricsReport> {
    chamfer_metrics_with(a, b, CosineMode::Absolute)
}

pub fn chamfer_metrics_with(a: &OrientedPointCloud, b: &OrientedPointCloud, mode: CosineMode) -> Result<MetricsReport> {
    if a.is_empty() || b.is_empty() {
        return Err(GeometryError::Validation(format!(
            "metrics need non-empty sets (got {} and {} points)",
            a.len(),
            b.len()
        )));
    }
    for cloud in [a, b] {
        if cloud.points.len() != cloud.normals.len() {
            return Err(GeometryError::Validation("point and normal counts differ".into()));
        }
    }
    let start = Instant::now();
    let (pa, na) = directional(a, b, mode);
    let (pb, nb) = directional(b, a, mode);
    Ok(MetricsReport {
        point_to_point: 0.5 * (pa + pb),
        normal_cosine: 0.5 * (na + nb),
        n_samples: [a.len(), b.len()],
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn directional(from: &OrientedPointCloud, to: &OrientedPointCloud, mode: CosineMode) -> (f64, f64) {
    let matches = nearest_neighbors(&to.points, &from.points);
    let mut dist = 0.0;
    let mut cos = 0.0;
    for (i, &(j, d)) in matches.iter().enumerate() {
        dist += d;
        cos += cosine_distance(&from.normals[i], &to.normals[j], mode);
    }
    let n = matches.len() as f64;
    (dist / n, cos / n)
}

/// `1 − cos` (or `1 − |cos|`) for unit vectors, evaluated as `½‖a − s·b‖²`
/// so that identical normals give exactly zero.
pub fn cosine_distance(a: &Vector3<f64>, b: &Vector3<f64>, mode: CosineMode) -> f64 {
    let s = match mode {
        CosineMode::Absolute if a.dot(b) < 0.0 => -1.0,
        _ => 1.0,
    };
    0.5 * (a - b * s).norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)))
            .collect()
    }

    fn brute(targets: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, t) in targets.iter().enumerate() {
            let d = (t - q).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    #[test]
    fn hash_equals_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let targets = random_points(&mut rng, 1 + trial * 37, 1.0);
            // queries include far-away points outside the grid
            let queries = random_points(&mut rng, 200, 3.0);
            let hash = SpatialHash::new(&targets);
            for q in &queries {
                assert_eq!(hash.nearest(q), brute(&targets, q));
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let targets = vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let hash = SpatialHash::new(&targets);
        assert_eq!(hash.nearest(&Vector3::zeros()).0, 0);
        assert_eq!(hash.nearest(&Vector3::new(2.0, 0.0, 0.0)).0, 0);
    }

    #[test]
    fn degenerate_layouts() {
        let same = vec![Vector3::new(0.3, 0.3, 0.3); 10];
        assert_eq!(SpatialHash::new(&same).nearest(&Vector3::zeros()).0, 0);
        let line: Vec<_> = (0..100).map(|i| Vector3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let hash = SpatialHash::new(&line);
        for i in 0..100 {
            let q = Vector3::new(i as f64 * 0.01 + 0.001, 0.2, -0.1);
            assert_eq!(hash.nearest(&q), brute(&line, &q));
        }
    }

    #[test]
    fn empty_set_rejected() {
        let a = OrientedPointCloud::new(vec![Vector3::zeros()], vec![Vector3::z()]).unwrap();
        assert!(chamfer_metrics(&a, &OrientedPointCloud::default()).is_err());
    }

    #[test]
    fn signed_mode_sees_flipped_normals() {
        let a = OrientedPointCloud::new(vec![Vector3::zeros()], vec![Vector3::z()]).unwrap();
        let b = OrientedPointCloud::new(vec![Vector3::zeros()], vec![-Vector3::z()]).unwrap();
        assert_eq!(chamfer_metrics(&a, &b).unwrap().normal_cosine, 0.0);
        assert_eq!(chamfer_metrics_with(&a, &b, CosineMode::Signed).unwrap().normal_cosine, 2.0);
    }
}
