//! The oriented point-cloud loss: eikonal, surface value, normal alignment
//! (as cosine similarity) and off-surface repulsion, each averaged over its
//! rows.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{IdfError, Result};
use crate::model::FieldVars;
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Allowed deviation of a stored normal from unit length.
pub const NORMAL_TOLERANCE: f64 = 1e-4;

/// Floor under squared gradient norms before the square root.
const NORM_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub eikonal: f64,
    pub surface: f64,
    pub normal: f64,
    pub offsurface: f64,
    /// Use `exp(−100·|f|)` rather than `exp(−100·f)` off the surface.
    pub offsurface_abs: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eikonal: 5.0,
            surface: 400.0,
            normal: 40.0,
            offsurface: 50.0,
            offsurface_abs: true,
        }
    }
}

/// Weighted terms and their sum as tape nodes (each `1×1`).
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub eikonal: Var,
    pub surface: Var,
    pub normal: Var,
    pub offsurface: Var,
    pub total: Var,
}

/// Weighted term values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub eikonal: f64,
    pub surface: f64,
    pub normal: f64,
    pub offsurface: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.eikonal + self.surface + self.normal + self.offsurface
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            eikonal: self.eikonal * s,
            surface: self.surface * s,
            normal: self.normal * s,
            offsurface: self.offsurface * s,
        }
    }

    pub fn add(&self, o: &LossTerms) -> LossTerms {
        LossTerms {
            eikonal: self.eikonal + o.eikonal,
            surface: self.surface + o.surface,
            normal: self.normal + o.normal,
            offsurface: self.offsurface + o.offsurface,
        }
    }
}

impl LossVars {
    pub fn values<F: Real>(&self, t: &Tape<F>) -> LossTerms {
        LossTerms {
            eikonal: t.scalar(self.eikonal).f64(),
            surface: t.scalar(self.surface).f64(),
            normal: t.scalar(self.normal).f64(),
            offsurface: t.scalar(self.offsurface).f64(),
        }
    }
}

pub fn validate_normals<F: Real>(normals: ArrayView2<F>) -> Result<()> {
    if normals.ncols() != 3 {
        return Err(IdfError::Shape(format!("normals must be n×3, got {:?}", normals.shape())));
    }
    for (i, row) in normals.rows().into_iter().enumerate() {
        let len = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if !((len - 1.0).abs() <= NORMAL_TOLERANCE) {
            return Err(IdfError::Validation(format!("normal {i} has length {len}, expected unit length")));
        }
    }
    Ok(())
}

/// Assembles the loss for a field evaluated on surface rows followed by
/// off-surface rows. `normals` holds one unit normal per surface row.
pub fn siren_loss<F: Real>(t: &mut Tape<F>, field: FieldVars, normals: &Array2<F>, weights: &LossWeights) -> Result<LossVars> {
    validate_normals(normals.view())?;
    let (rows, cols) = t.shape(field.grad);
    if cols != 3 || t.shape(field.value) != (rows, 1) {
        return Err(IdfError::Shape("field must provide n×1 values and n×3 gradients".into()));
    }
    let n_surface = normals.nrows();
    if n_surface > rows {
        return Err(IdfError::Shape(format!("{n_surface} normals for {rows} field rows")));
    }
    let zero = t.constant_scalar(F::zero());

    let gg = t.square(field.grad);
    let nn = t.sum_cols(gg);
    let nn = t.clamp_min(nn, F::of(NORM_FLOOR));
    let len = t.sqrt(nn);
    let dev = t.add_scalar(len, -F::one());
    let dev = t.abs(dev);
    let eik = t.mean(dev);
    let eikonal = t.scale(eik, F::of(weights.eikonal));

    let (surface, normal) = if n_surface > 0 {
        let v = t.slice_rows(field.value, 0, n_surface);
        let v = t.abs(v);
        let v = t.mean(v);
        let surface = t.scale(v, F::of(weights.surface));
        let g = t.slice_rows(field.grad, 0, n_surface);
        let n = t.constant(normals.clone());
        let gn = t.mul(g, n);
        let dot = t.sum_cols(gn);
        // cosine similarity; the raw inner product is unbounded below
        let surface_len = t.slice_rows(len, 0, n_surface);
        let cos = t.div(dot, surface_len);
        let dot = t.mean(cos);
        let c = t.neg(dot);
        let c = t.add_scalar(c, F::one());
        (surface, t.scale(c, F::of(weights.normal)))
    } else {
        (zero, zero)
    };

    let offsurface = if rows > n_surface {
        let v = t.slice_rows(field.value, n_surface, rows - n_surface);
        let v = if weights.offsurface_abs { t.abs(v) } else { v };
        let v = t.scale(v, F::of(-100.0));
        let e = t.exp(v);
        let e = t.mean(e);
        t.scale(e, F::of(weights.offsurface))
    } else {
        zero
    };

    let s1 = t.add(eikonal, surface);
    let s2 = t.add(normal, offsurface);
    let total = t.add(s1, s2);
    Ok(LossVars {
        eikonal,
        surface,
        normal,
        offsurface,
        total,
    })
}
