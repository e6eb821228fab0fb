//! Regular feature grids over `[−1, 1]^d`: scatter-mean of per-point
//! features, a small convolutional propagation stack, and multilinear
//! queries. Nodes sit at cell centers `−1 + (i + ½)·h`, `h = 2/R`.

use std::rc::Rc;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdfError, Result};
use crate::jet::Jet;
use crate::real::Real;
use crate::siren::{Dense, Module};
use crate::tape::{Csr, Tape, Var};

/// Which coordinates index the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridMode {
    Volume,
    /// Project along `axis` (0, 1 or 2) onto a square grid.
    Plane { axis: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub mode: GridMode,
    pub resolution: usize,
}

impl GridLayout {
    pub fn new(mode: GridMode, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(IdfError::Config(format!("grid resolution must be at least 2, got {resolution}")));
        }
        if let GridMode::Plane { axis } = mode {
            if axis > 2 {
                return Err(IdfError::Config(format!("projection axis must be 0, 1 or 2, got {axis}")));
            }
        }
        Ok(GridLayout { mode, resolution })
    }

    /// Coordinate axes spanned by the grid.
    pub fn axes(&self) -> Vec<usize> {
        match self.mode {
            GridMode::Volume => vec![0, 1, 2],
            GridMode::Plane { axis } => (0..3).filter(|&a| a != axis).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.axes().len()
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn spacing(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.resolution + i)
    }

    pub fn node_center(&self, node: usize) -> [f64; 3] {
        let mut p = [0.0; 3];
        let mut rest = node;
        for a in self.axes() {
            p[a] = -1.0 + ((rest % self.resolution) as f64 + 0.5) * self.spacing();
            rest /= self.resolution;
        }
        p
    }

    /// Node of the cell containing `p` (clamped to the grid).
    pub fn cell_of(&self, p: &[f64; 3]) -> usize {
        let r = self.resolution;
        let idx: Vec<usize> = self
            .axes()
            .iter()
            .map(|&a| (((p[a] + 1.0) / self.spacing()).floor().max(0.0) as usize).min(r - 1))
            .collect();
        self.flat(&idx)
    }

    /// `N×M` averaging map from points to the cells containing them.
    pub fn scatter_matrix<F: Real>(&self, points: &[[f64; 3]]) -> Csr<F> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); self.node_count()];
        for (j, p) in points.iter().enumerate() {
            members[self.cell_of(p)].push(j);
        }
        let rows: Vec<Vec<(usize, F)>> = members
            .iter()
            .map(|m| {
                let w = F::one() / F::of(m.len().max(1) as f64);
                m.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        Csr::from_rows(points.len(), &rows)
    }

    /// One `N×N` map per stencil offset in `{−1, 0, 1}^d` (row-major over
    /// the offsets), reading the neighbor or zero past the boundary.
    pub fn shift_maps<F: Real>(&self) -> Vec<Csr<F>> {
        let d = self.dim();
        let r = self.resolution as isize;
        let n = self.node_count();
        let offsets: Vec<Vec<isize>> = (0..3usize.pow(d as u32))
            .map(|o| (0..d).map(|a| (o / 3usize.pow(a as u32) % 3) as isize - 1).collect())
            .collect();
        offsets
            .iter()
            .map(|off| {
                let rows: Vec<Vec<(usize, F)>> = (0..n)
                    .map(|node| {
                        let mut rest = node;
                        let mut idx = Vec::with_capacity(d);
                        for &o in off {
                            let i = (rest % self.resolution) as isize + o;
                            rest /= self.resolution;
                            if i < 0 || i >= r {
                                return Vec::new();
                            }
                            idx.push(i as usize);
                        }
                        vec![(self.flat(&idx), F::one())]
                    })
                    .collect();
                Csr::from_rows(n, &rows)
            })
            .collect()
    }

    /// Multilinear interpolation weights at `points`: the value map and
    /// its derivative along each of x, y, z. Also returns how many points
    /// lay outside `[−1, 1]` and were clamped.
    pub fn interpolation<F: Real>(&self, points: &[[f64; 3]]) -> Interpolation<F> {
        let axes = self.axes();
        let d = axes.len();
        let h = self.spacing();
        let r = self.resolution;
        let mut value = Vec::with_capacity(points.len());
        let mut deriv: [Vec<Vec<(usize, F)>>; 3] = Default::default();
        let mut outside = 0;
        for p in points {
            if axes.iter().any(|&a| p[a].abs() > 1.0) {
                outside += 1;
            }
            let mut base = Vec::with_capacity(d);
            let mut frac = Vec::with_capacity(d);
            let mut slope = Vec::with_capacity(d);
            for &a in &axes {
                let u = (p[a] + 1.0) / h - 0.5;
                let i0 = (u.floor().max(0.0) as usize).min(r - 2);
                let f = u - i0 as f64;
                let (f, s) = if f < 0.0 {
                    (0.0, 0.0)
                } else if f > 1.0 {
                    (1.0, 0.0)
                } else {
                    (f, 1.0 / h)
                };
                base.push(i0);
                frac.push(f);
                slope.push(s);
            }
            let mut vrow = Vec::with_capacity(1 << d);
            let mut drows: Vec<Vec<(usize, F)>> = vec![Vec::with_capacity(1 << d); d];
            for corner in 0..(1usize << d) {
                let idx: Vec<usize> = (0..d).map(|a| base[a] + (corner >> a & 1)).collect();
                let node = self.flat(&idx);
                let factors: Vec<f64> = (0..d).map(|a| if corner >> a & 1 == 1 { frac[a] } else { 1.0 - frac[a] }).collect();
                vrow.push((node, F::of(factors.iter().product())));
                for a in 0..d {
                    let sign = if corner >> a & 1 == 1 { 1.0 } else { -1.0 };
                    let others: f64 = (0..d).filter(|&b| b != a).map(|b| factors[b]).product();
                    drows[a].push((node, F::of(sign * slope[a] * others)));
                }
            }
            value.push(vrow);
            let mut used = drows.into_iter();
            for (k, rows) in deriv.iter_mut().enumerate() {
                rows.push(if axes.contains(&k) { used.next().expect("axis row") } else { Vec::new() });
            }
        }
        let n = self.node_count();
        Interpolation {
            value: Csr::from_rows(n, &value),
            derivative: deriv.map(|rows| Csr::from_rows(n, &rows)),
            outside,
        }
    }
}

pub struct Interpolation<F> {
    pub value: Csr<F>,
    pub derivative: [Csr<F>; 3],
    pub outside: usize,
}

impl<F: Real> Interpolation<F> {
    /// Values and x/y/z derivatives of the interpolated features as an
    /// order-1 jet.
    pub fn jet(self, t: &mut Tape<F>, features: Var) -> Jet {
        let v = t.sparse(Rc::new(self.value), features);
        let d1 = self.derivative.into_iter().map(|m| t.sparse(Rc::new(m), features)).collect();
        Jet { v, d1, d2: Vec::new() }
    }
}

/// Convolutional propagation: each layer maps the stencil-stacked features
/// of a node to `channels` outputs; tanh between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Real> Module<F> for ConvStack<F> {
    fn params(&self) -> Vec<&Array2<F>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

impl<F: Real> ConvStack<F> {
    /// `depth` layers of stencil size `3^dim`; Glorot-uniform weights.
    pub fn init(dim: usize, channels: usize, depth: usize, seed: u64) -> Self {
        let taps = 3usize.pow(dim as u32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = taps * channels;
        let bound = (6.0 / (fan_in + channels) as f64).sqrt();
        ConvStack {
            layers: (0..depth).map(|_| Dense::uniform(fan_in, channels, bound, &mut rng)).collect(),
        }
    }

    pub fn forward(&self, shifts: &[Csr<F>], features: ArrayView2<F>) -> Array2<F> {
        let mut h = features.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let cols: Vec<Array2<F>> = shifts.iter().map(|s| s.apply(h.view())).collect();
            let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
            let stacked = ndarray::concatenate(ndarray::Axis(1), &views).expect("equal node counts");
            h = l.apply(stacked.view());
            if i + 1 < self.layers.len() {
                h.mapv_inplace(F::tanh);
            }
        }
        h
    }

    pub fn tape(&self, t: &mut Tape<F>, vars: &[Var], shifts: &[Rc<Csr<F>>], features: Var) -> Var {
        let mut h = features;
        for i in 0..self.layers.len() {
            let cols: Vec<Var> = shifts.iter().map(|s| t.sparse(s.clone(), h)).collect();
            let stacked = t.concat_cols(&cols);
            let z = t.matmul_wt(stacked, vars[2 * i]);
            h = t.add(z, vars[2 * i + 1]);
            if i + 1 < self.layers.len() {
                h = t.tanh(h);
            }
        }
        h
    }

    pub fn cast<G: Real>(&self) -> ConvStack<G> {
        ConvStack {
            layers: crate::siren::cast_layers(&self.layers),
        }
    }
}

/// Node features of a built grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<F> {
    pub layout: GridLayout,
    /// `N×C_g`.
    pub features: Array2<F>,
}

impl<F: Real> FeatureGrid<F> {
    /// Interpolated features at `points` and the number of clamped points.
    pub fn query(&self, points: ArrayView2<F>) -> Result<(Array2<F>, usize)> {
        let pts = rows_to_points(points)?;
        let w = self.layout.interpolation::<F>(&pts);
        Ok((w.value.apply(self.features.view()), w.outside))
    }

    /// Interpolated features and their derivatives along x, y and z.
    pub fn query_with_gradient(&self, points: ArrayView2<F>) -> Result<(Array2<F>, [Array2<F>; 3])> {
        let pts = rows_to_points(points)?;
        let w = self.layout.interpolation::<F>(&pts);
        let v = w.value.apply(self.features.view());
        let d = w.derivative.map(|m| m.apply(self.features.view()));
        Ok((v, d))
    }
}

pub fn rows_to_points<F: Real>(x: ArrayView2<F>) -> Result<Vec<[f64; 3]>> {
    if x.ncols() != 3 {
        return Err(IdfError::Shape(format!("expected n×3 points, got {:?}", x.shape())));
    }
    Ok(x.rows().into_iter().map(|r| [r[0].f64(), r[1].f64(), r[2].f64()]).collect())
}
