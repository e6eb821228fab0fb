//! Closed-form fields used as references: planes, spheres and a sphere with
//! a sinusoidal relief.

use idf_geometry::OrientedPointCloud;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IdfError, Result};

/// A scalar field with an analytic gradient.
pub trait AnalyticField: Sync {
    fn value(&self, p: &Vector3<f64>) -> f64;
    fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64>;
}

/// `f(x) = g·x + c`. The plane `z = 0` is `g = (0, 0, 1)`, `c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearField {
    pub gradient: Vector3<f64>,
    pub offset: f64,
}

impl LinearField {
    pub fn plane_z() -> Self {
        LinearField {
            gradient: Vector3::z(),
            offset: 0.0,
        }
    }
}

impl AnalyticField for LinearField {
    fn value(&self, p: &Vector3<f64>) -> f64 {
        self.gradient.dot(p) + self.offset
    }

    fn gradient(&self, _p: &Vector3<f64>) -> Vector3<f64> {
        self.gradient
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

impl Sphere {
    pub fn centered(radius: f64) -> Self {
        Sphere {
            center: Vector3::zeros(),
            radius,
        }
    }
}

impl AnalyticField for Sphere {
    fn value(&self, p: &Vector3<f64>) -> f64 {
        (p - self.center).norm() - self.radius
    }

    fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center).normalize()
    }
}

/// The surface `‖x‖ = r + h(x)` with
/// `h = a·sin(k·atan2(y, x))·(x² + y²)/‖x‖²`; the last factor is `sin²` of
/// the polar angle and fades the relief out towards the poles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BumpySphere {
    pub radius: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for BumpySphere {
    fn default() -> Self {
        BumpySphere {
            radius: 0.5,
            amplitude: 0.02,
            frequency: 20.0,
        }
    }
}

impl BumpySphere {
    /// Radial height of the surface above direction `u` (unit).
    pub fn surface_radius(&self, u: &Vector3<f64>) -> f64 {
        let phi = u.y.atan2(u.x);
        self.radius + self.amplitude * (self.frequency * phi).sin() * (u.x * u.x + u.y * u.y)
    }

    /// Approximately area-uniform oriented samples on the surface.
    pub fn sample(&self, count: usize, seed: u64) -> Result<OrientedPointCloud> {
        if count == 0 {
            return Err(IdfError::Validation("sample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r_max = self.radius + self.amplitude;
        // dA = r²/(n·u) dΩ; rejection against a bound on that density
        let bound = r_max * r_max / 0.25;
        let mut points = Vec::with_capacity(count);
        let mut normals = Vec::with_capacity(count);
        while points.len() < count {
            let u = random_direction(&mut rng);
            let r = self.surface_radius(&u);
            let p = u * r;
            let n = self.gradient(&p).normalize();
            let density = r * r / n.dot(&u);
            if density > bound {
                return Err(IdfError::Numeric("relief too steep for the sampling bound".into()));
            }
            if rng.random::<f64>() * bound < density {
                points.push(p);
                normals.push(n);
            }
        }
        Ok(OrientedPointCloud::new(points, normals)?)
    }
}

impl AnalyticField for BumpySphere {
    /// Not a distance away from the surface, but its zero set is exact.
    fn value(&self, p: &Vector3<f64>) -> f64 {
        let r = p.norm();
        r - self.surface_radius(&(p / r))
    }

    fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (x, y, z) = (p.x, p.y, p.z);
        let r2 = x * x + y * y + z * z;
        let r = r2.sqrt();
        let rho2 = x * x + y * y;
        let (a, k) = (self.amplitude, self.frequency);
        let phi = y.atan2(x);
        let s = (k * phi).sin();
        let c = (k * phi).cos();
        // h = a·s·q with q = rho²/r²
        let q = rho2 / r2;
        let dq = Vector3::new(2.0 * x / r2 - 2.0 * rho2 * x / (r2 * r2), 2.0 * y / r2 - 2.0 * rho2 * y / (r2 * r2), -2.0 * rho2 * z / (r2 * r2));
        let dphi = if rho2 > 0.0 {
            Vector3::new(-y / rho2, x / rho2, 0.0)
        } else {
            Vector3::zeros()
        };
        let dh = (dphi * (k * c * q) + dq * s) * a;
        p / r - dh
    }
}

pub fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n2 = v.norm_squared();
        if n2 > 1e-6 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

/// Uniform points in `[lo, hi]³`.
pub fn uniform_box(count: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|_| Vector3::new(rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)))
        .collect()
}

/// Oriented samples of a centered sphere.
pub fn sphere_cloud(radius: f64, count: usize, seed: u64) -> Result<OrientedPointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<_> = (0..count).map(|_| random_direction(&mut rng)).collect();
    Ok(OrientedPointCloud::new(normals.iter().map(|n| n * radius).collect(), normals)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bumpy_gradient_matches_differences() {
        let f = BumpySphere::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_direction(&mut rng) * rng.random_range(0.3..0.8);
            let g = f.gradient(&p);
            let h = 1e-6;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let fd = (f.value(&(p + e)) - f.value(&(p - e))) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-6, "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn bumpy_samples_lie_on_surface() {
        let f = BumpySphere::default();
        let cloud = f.sample(2000, 3).unwrap();
        for (p, n) in cloud.points.iter().zip(&cloud.normals) {
            assert!(f.value(p).abs() < 1e-12);
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(p) > 0.0);
        }
    }

    #[test]
    fn sphere_and_plane() {
        let s = Sphere::centered(0.5);
        assert_eq!(s.value(&Vector3::new(0.5, 0.0, 0.0)), 0.0);
        assert_eq!(s.gradient(&Vector3::new(0.0, 2.0, 0.0)), Vector3::y());
        assert_eq!(LinearField::plane_z().value(&Vector3::new(3.0, 1.0, 0.2)), 0.2);
    }
}
