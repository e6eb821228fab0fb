//! Numerical checks of the gradient-perturbation bounds that justify
//! evaluating the base normal at the undisplaced point.
//!
//! Constants are measured, not known: `ε̂` and `L̂` from gradient norms,
//! `M̂` from finite-difference probes around each sample plus the checked
//! pairs themselves.

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{random_direction, AnalyticField};
use crate::error::{IdfError, Result};
use crate::real::Real;
use crate::siren::SinusoidalNetwork;

/// Probe length for the smoothness estimate.
pub const PROBE_STEP: f64 = 1e-3;

/// Slack for rounding when comparing a measured side against its bound.
pub const BOUND_TOLERANCE: f64 = 1e-12;

const CHUNK: usize = 4096;

/// A field whose gradient can be evaluated at arbitrary points.
pub trait GradientField: Sync {
    fn gradients(&self, x: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>>;
}

impl<T: AnalyticField> GradientField for T {
    fn gradients(&self, x: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        Ok(x.iter().map(|p| self.gradient(p)).collect())
    }
}

impl<F: Real> GradientField for SinusoidalNetwork<F> {
    fn gradients(&self, x: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let parts: Vec<Result<Vec<Vector3<f64>>>> = x
            .par_chunks(CHUNK)
            .map(|chunk| {
                let a = Array2::from_shape_fn((chunk.len(), 3), |(i, k)| F::of(chunk[i][k]));
                let g = self.input_gradient(a.view())?;
                Ok(g.rows().into_iter().map(|r| Vector3::new(r[0].f64(), r[1].f64(), r[2].f64())).collect())
            })
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub epsilon_hat: f64,
    pub m_hat: f64,
    pub l_hat: f64,
}

fn eikonal_constants(grads: &[Vector3<f64>]) -> (f64, f64) {
    grads.iter().fold((0.0f64, 0.0f64), |(e, l), g| {
        let n = g.norm();
        (e.max((n - 1.0).abs()), l.max(n))
    })
}

fn max_ratio(a: &[Vector3<f64>], b: &[Vector3<f64>], lengths: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(lengths)
        .filter(|(_, &h)| h > 0.0)
        .map(|((u, v), h)| (u - v).norm() / h)
        .fold(0.0, f64::max)
}

/// Probes each sample at distance [`PROBE_STEP`] along a random direction
/// and along its own gradient; returns the largest difference quotient.
fn probe_smoothness<G: GradientField + ?Sized>(field: &G, samples: &[Vector3<f64>], grads: &[Vector3<f64>], seed: u64) -> Result<(f64, Vec<Vector3<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(2 * samples.len());
    for (p, g) in samples.iter().zip(grads) {
        probes.push(p + random_direction(&mut rng) * PROBE_STEP);
        let dir = if g.norm() > 0.0 { g.normalize() } else { random_direction(&mut rng) };
        probes.push(p + dir * PROBE_STEP);
    }
    let pg = field.gradients(&probes)?;
    let doubled: Vec<Vector3<f64>> = grads.iter().flat_map(|g| [*g, *g]).collect();
    let lengths: Vec<f64> = probes.iter().zip(samples.iter().flat_map(|p| [p, p])).map(|(q, p)| (q - p).norm()).collect();
    let m = max_ratio(&pg, &doubled, &lengths);
    Ok((m, pg))
}

/// `ε̂ = max |‖∇f‖ − 1|`, `L̂ = max ‖∇f‖` over samples and probes, and `M̂`
/// the largest gradient difference quotient seen by the probes.
pub fn estimate_constants<G: GradientField + ?Sized>(field: &G, samples: &[Vector3<f64>], seed: u64) -> Result<Constants> {
    let grads = field.gradients(samples)?;
    let (m_hat, probe_grads) = probe_smoothness(field, samples, &grads, seed)?;
    let (e1, l1) = eikonal_constants(&grads);
    let (e2, l2) = eikonal_constants(&probe_grads);
    Ok(Constants {
        epsilon_hat: e1.max(e2),
        m_hat,
        l_hat: l1.max(l2),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub violations: usize,
    pub violation_fraction: f64,
    /// Largest `lhs / rhs` over samples with a positive right-hand side.
    pub max_ratio: f64,
    pub violating_points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSample {
    /// `‖n̂ − n‖`.
    pub lhs: f64,
    /// `(1+ε̂)/(1−ε̂)·|δ|·M̂`.
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon_hat: f64,
    #[serde(rename = "M_hat")]
    pub m_hat: f64,
    #[serde(rename = "L_hat")]
    pub l_hat: f64,
    pub sample_count: usize,
    /// `‖∇f(x̂) − ∇f(x)‖ ≤ |δ|·L̂·M̂`.
    pub lipschitz: BoundCheck,
    /// `‖∇f(x̂) − ∇f(x)‖ ≤ (1+ε̂)·|δ|·M̂`.
    pub eikonal: BoundCheck,
    /// `‖n̂ − n‖ ≤ (1+ε̂)/(1−ε̂)·|δ|·M̂`.
    pub normalized: BoundCheck,
    pub samples: Vec<BoundSample>,
}

impl BoundReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| IdfError::Numeric(format!("report serialization: {e}")))
    }
}

fn tally(points: &[Vector3<f64>], pairs: impl Iterator<Item = (f64, f64)>) -> BoundCheck {
    let mut check = BoundCheck::default();
    for (p, (lhs, rhs)) in points.iter().zip(pairs) {
        if lhs > rhs + BOUND_TOLERANCE {
            check.violations += 1;
            check.violating_points.push([p.x, p.y, p.z]);
        }
        if rhs > 0.0 {
            check.max_ratio = check.max_ratio.max(lhs / rhs);
        }
    }
    check.violation_fraction = if points.is_empty() { 0.0 } else { check.violations as f64 / points.len() as f64 };
    check
}

/// Displaces each sample by `d_i` along its unit normal, `x̂ = x + d·n`, and
/// checks the three bounds with `δ = d/‖∇f(x)‖`. Constants are estimated
/// over the samples, the displaced points and the probes around both.
pub fn verify_bounds<G: GradientField + ?Sized>(field: &G, samples: &[Vector3<f64>], displacements: &[f64], seed: u64) -> Result<BoundReport> {
    if samples.len() != displacements.len() {
        return Err(IdfError::Shape(format!("{} samples with {} displacements", samples.len(), displacements.len())));
    }
    if samples.is_empty() {
        return Err(IdfError::Validation("no samples to check".into()));
    }
    let grads = field.gradients(samples)?;
    let mut moved = Vec::with_capacity(samples.len());
    let mut deltas = Vec::with_capacity(samples.len());
    for (i, (p, g)) in samples.iter().zip(&grads).enumerate() {
        let norm = g.norm();
        if !(norm > 0.0) {
            return Err(IdfError::DegenerateNormal { point: [p.x, p.y, p.z], norm });
        }
        let d = displacements[i];
        moved.push(p + g * (d / norm));
        deltas.push(d / norm);
    }
    let moved_grads = field.gradients(&moved)?;

    let mut all = samples.to_vec();
    all.extend_from_slice(&moved);
    let mut all_grads = grads.clone();
    all_grads.extend_from_slice(&moved_grads);
    let (probe_m, probe_grads) = probe_smoothness(field, &all, &all_grads, seed)?;
    let steps: Vec<f64> = samples.iter().zip(&moved).map(|(p, q)| (q - p).norm()).collect();
    let m_hat = probe_m.max(max_ratio(&moved_grads, &grads, &steps));
    let (e1, l1) = eikonal_constants(&all_grads);
    let (e2, l2) = eikonal_constants(&probe_grads);
    let (epsilon_hat, l_hat) = (e1.max(e2), l1.max(l2));
    if epsilon_hat >= 1.0 {
        return Err(IdfError::InapplicableBound(format!(
            "normalized bound needs ε̂ < 1, measured {epsilon_hat}"
        )));
    }

    let diffs: Vec<f64> = grads.iter().zip(&moved_grads).map(|(u, v)| (v - u).norm()).collect();
    let lipschitz = tally(samples, diffs.iter().zip(&deltas).map(|(&l, d)| (l, d.abs() * l_hat * m_hat)));
    let eikonal = tally(samples, diffs.iter().zip(&deltas).map(|(&l, d)| (l, (1.0 + epsilon_hat) * d.abs() * m_hat)));
    let scale = (1.0 + epsilon_hat) / (1.0 - epsilon_hat);
    let per_sample: Vec<BoundSample> = grads
        .iter()
        .zip(&moved_grads)
        .zip(&deltas)
        .map(|((u, v), d)| BoundSample {
            lhs: (v.normalize() - u.normalize()).norm(),
            rhs: scale * d.abs() * m_hat,
        })
        .collect();
    let normalized = tally(samples, per_sample.iter().map(|s| (s.lhs, s.rhs)));
    Ok(BoundReport {
        epsilon_hat,
        m_hat,
        l_hat,
        sample_count: samples.len(),
        lipschitz,
        eikonal,
        normalized,
        samples: per_sample,
    })
}

/// Uniform points in the shell `r_min ≤ ‖x‖ ≤ r_max`.
pub fn shell_samples(count: usize, r_min: f64, r_max: f64, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (r_min.powi(3), r_max.powi(3));
    (0..count)
        .map(|_| random_direction(&mut rng) * rng.random_range(a..=b).cbrt())
        .collect()
}

/// `count` points drawn from `anchors` with replacement, each moved up to
/// `radius` in a random direction.
pub fn jittered_samples(anchors: &[Vector3<f64>], count: usize, radius: f64, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if anchors.is_empty() {
        return Err(IdfError::Validation("no anchor points to jitter".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = anchors[rng.random_range(0..anchors.len())];
            a + random_direction(&mut rng) * rng.random_range(0.0..=radius)
        })
        .collect())
}

/// Uniform points in `[lo, hi]³`.
pub fn cube_samples(count: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vector3<f64>> {
    crate::analytic::uniform_box(count, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Displacements uniform in `[−alpha, alpha]`.
pub fn uniform_displacements(count: usize, alpha: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random_range(-alpha..=alpha)).collect()
}
