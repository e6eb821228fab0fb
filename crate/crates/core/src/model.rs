//! The composed signed distance `f̂(x) = B(x + χ(B(x))·D(x)·∇B/‖∇B‖)`.

use std::fs;
use std::path::Path;

use idf_geometry::{cube_nodes, ScalarGrid};
use nalgebra::Vector3;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticField;
use crate::error::{IdfError, Result};
use crate::jet::{self, Jet};
use crate::real::Real;
use crate::siren::{Head, NetworkCheckpoint, SinusoidalNetwork};
use crate::tape::{Tape, Var};

/// Gradient norms below this make the base normal undefined.
pub const EPS_NORM: f64 = 1e-8;

/// Rows evaluated per batch by grid evaluation.
pub const GRID_CHUNK: usize = 8192;

/// Default largest grid resolution accepted by [`eval_sdf_grid`].
pub const DEFAULT_RESOLUTION_CAP: usize = 512;

pub const BUNDLE_VERSION: u32 = 1;

/// `χ(v) = 1 / (1 + (v/ν)⁴)`.
pub fn attenuation<F: Real>(v: F, nu: F) -> F {
    let r = v / nu;
    let r2 = r * r;
    F::one() / (F::one() + r2 * r2)
}

/// Composition over a closed-form base at one point, given the raw
/// (unattenuated) displacement there.
pub fn compose_analytic<A: AnalyticField + ?Sized>(base: &A, x: &Vector3<f64>, raw_displacement: f64, nu: f64, use_attenuation: bool) -> Result<f64> {
    let g = base.gradient(x);
    let norm = g.norm();
    if !(norm > EPS_NORM) {
        return Err(IdfError::DegenerateNormal { point: [x.x, x.y, x.z], norm });
    }
    let chi = if use_attenuation { attenuation(base.value(x), nu) } else { 1.0 };
    Ok(base.value(&(x + g / norm * (chi * raw_displacement))))
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub use_tanh_bound: bool,
    pub use_attenuation: bool,
    pub use_progressive: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            use_tanh_bound: true,
            use_attenuation: true,
            use_progressive: true,
        }
    }
}

impl Switches {
    /// Every architectural and schedule aid disabled.
    pub fn none() -> Self {
        Switches {
            use_tanh_bound: false,
            use_attenuation: false,
            use_progressive: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_hidden: usize,
    pub base_depth: usize,
    pub displacement_hidden: usize,
    pub displacement_depth: usize,
    pub omega_base: f64,
    pub omega_displacement: f64,
    pub alpha: f64,
    pub nu: f64,
    pub use_tanh_bound: bool,
    pub use_attenuation: bool,
    pub use_progressive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_hidden: 256,
            base_depth: 4,
            displacement_hidden: 256,
            displacement_depth: 4,
            omega_base: 15.0,
            omega_displacement: 60.0,
            alpha: 0.05,
            nu: 0.02,
            use_tanh_bound: true,
            use_attenuation: true,
            use_progressive: true,
        }
    }
}

impl ModelConfig {
    pub fn switches(&self) -> Switches {
        Switches {
            use_tanh_bound: self.use_tanh_bound,
            use_attenuation: self.use_attenuation,
            use_progressive: self.use_progressive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.nu > 0.0) {
            return Err(IdfError::Config(format!("alpha and nu must be positive (alpha {}, nu {})", self.alpha, self.nu)));
        }
        Ok(())
    }
}

/// Anything that maps `n×3` query points to signed distances.
pub trait SdfField<F: Real>: Sync {
    fn sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdfModel<F> {
    pub base: SinusoidalNetwork<F>,
    pub displacement: SinusoidalNetwork<F>,
    pub alpha: f64,
    pub nu: f64,
    pub switches: Switches,
}

/// Values and input gradients of a field on a batch, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    /// `n×1`.
    pub value: Var,
    /// `n×3`.
    pub grad: Var,
}

impl<F: Real> IdfModel<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let base = SinusoidalNetwork::init(3, cfg.base_hidden, cfg.base_depth, 1, cfg.omega_base, Head::Linear, seed)?;
        let head = if cfg.use_tanh_bound {
            Head::ScaledTanh { alpha: cfg.alpha }
        } else {
            Head::Linear
        };
        let displacement = SinusoidalNetwork::init(
            3,
            cfg.displacement_hidden,
            cfg.displacement_depth,
            1,
            cfg.omega_displacement,
            head,
            seed.wrapping_add(0x9e37_79b9),
        )?;
        Ok(IdfModel {
            base,
            displacement,
            alpha: cfg.alpha,
            nu: cfg.nu,
            switches: cfg.switches(),
        })
    }

    /// Base gradients normalized to unit length.
    pub fn base_normal(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        base_normal(&self.base, x)
    }

    /// `χ(B(x))·D(x)`, the signed offset applied along the base normal.
    pub fn offset(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        let b = self.base.forward(x)?.column(0).to_owned();
        let d = self.displacement.forward(x)?.column(0).to_owned();
        Ok(self.attenuate(&b, d))
    }

    fn attenuate(&self, base: &Array1<F>, mut d: Array1<F>) -> Array1<F> {
        if self.switches.use_attenuation {
            let nu = F::of(self.nu);
            d.zip_mut_with(base, |d, &b| *d = *d * attenuation(b, nu));
        }
        d
    }

    /// Composed signed distance; degenerate base normals are an error.
    pub fn compose_sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        let dual = self.base.forward_with_gradient(x)?;
        let normals = normalize_rows(&dual.input_grads, x)?;
        let d = self.displacement.forward(x)?.column(0).to_owned();
        let s = self.attenuate(&dual.values.column(0).to_owned(), d);
        let y = &x + &(normals * &s.insert_axis(Axis(1)));
        Ok(self.base.forward(y.view())?.column(0).to_owned())
    }

    pub fn base_sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        Ok(self.base.forward(x)?.column(0).to_owned())
    }

    pub fn base_field(&self) -> BaseField<'_, F> {
        BaseField(&self.base)
    }

    /// Training-time composition on the tape. Returns the base field and
    /// the composed field at `x` with input gradients; points whose base
    /// gradient is degenerate receive zero displacement.
    pub fn tape_fields(&self, t: &mut Tape<F>, base_vars: &[Var], disp_vars: &[Var], x: Array2<F>, composed: bool) -> (FieldVars, Option<FieldVars>) {
        let nu = F::of(self.nu);
        let att = self.switches.use_attenuation;
        let disp = &self.displacement;
        compose_on_tape(t, &self.base, base_vars, x, nu, att, composed, |t, xj, _b| disp.jet(t, disp_vars, xj))
    }

    pub fn cast<G: Real>(&self) -> IdfModel<G> {
        IdfModel {
            base: self.base.cast(),
            displacement: self.displacement.cast(),
            alpha: self.alpha,
            nu: self.nu,
            switches: self.switches,
        }
    }

    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| IdfError::io(dir, e))?;
        write_json(&dir.join("base.json"), &self.base.to_checkpoint())?;
        write_json(&dir.join("displacement.json"), &self.displacement.to_checkpoint())?;
        let manifest = BundleManifest {
            format_version: BUNDLE_VERSION,
            alpha: self.alpha,
            nu: self.nu,
            switches: self.switches,
            omega_base: self.base.omega.f64(),
            omega_displacement: self.displacement.omega.f64(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != BUNDLE_VERSION {
            return Err(IdfError::format(
                dir.join("manifest.json"),
                format!("bundle format version {} is not supported", manifest.format_version),
            ));
        }
        let base: NetworkCheckpoint = read_json(&dir.join("base.json"))?;
        let displacement: NetworkCheckpoint = read_json(&dir.join("displacement.json"))?;
        Ok(IdfModel {
            base: SinusoidalNetwork::from_checkpoint(&base)?,
            displacement: SinusoidalNetwork::from_checkpoint(&displacement)?,
            alpha: manifest.alpha,
            nu: manifest.nu,
            switches: manifest.switches,
        })
    }
}

impl<F: Real> SdfField<F> for IdfModel<F> {
    fn sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        self.compose_sdf(x)
    }
}

/// The base network alone as a field.
pub struct BaseField<'a, F>(pub &'a SinusoidalNetwork<F>);

impl<F: Real> SdfField<F> for BaseField<'_, F> {
    fn sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        Ok(self.0.forward(x)?.column(0).to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub alpha: f64,
    pub nu: f64,
    pub switches: Switches,
    pub omega_base: f64,
    pub omega_displacement: f64,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| IdfError::format(path, e))?;
    fs::write(path, text).map_err(|e| IdfError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| IdfError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IdfError::format(path, e))
}

/// Unit base normals, or a degenerate-normal error naming the first bad point.
pub fn base_normal<F: Real>(base: &SinusoidalNetwork<F>, x: ArrayView2<F>) -> Result<Array2<F>> {
    let g = base.input_gradient(x)?;
    normalize_rows(&g, x)
}

fn normalize_rows<F: Real>(g: &Array2<F>, x: ArrayView2<F>) -> Result<Array2<F>> {
    let mut out = g.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<F>().sqrt();
        if !(norm.f64() > EPS_NORM) {
            return Err(IdfError::DegenerateNormal {
                point: [x[[i, 0]].f64(), x[[i, 1]].f64(), x[[i, 2]].f64()],
                norm: norm.f64(),
            });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Builds base and (optionally) composed fields on the tape. The
/// displacement closure receives the order-1 input jet and the order-1 base
/// jet and returns the raw displacement jet (`n×1`).
#[allow(clippy::too_many_arguments)]
pub fn compose_on_tape<F: Real>(
    t: &mut Tape<F>,
    base: &SinusoidalNetwork<F>,
    base_vars: &[Var],
    x: Array2<F>,
    nu: F,
    use_attenuation: bool,
    composed: bool,
    displacement: impl FnOnce(&mut Tape<F>, &Jet, &Jet) -> Jet,
) -> (FieldVars, Option<FieldVars>) {
    let order = if composed { 2 } else { 1 };
    let xj = jet::input(t, x, order);
    let b = base.jet(t, base_vars, &xj);
    let base_field = FieldVars {
        value: b.v,
        grad: jet::gradient(t, &b),
    };
    if !composed {
        return (base_field, None);
    }
    let x1 = xj.truncate(1);
    let b1 = b.truncate(1);

    // base normal as an order-1 jet; degenerate rows are masked out below
    let g = jet::gradient_jet(t, &b);
    let gg = jet::mul(t, &g, &g);
    let nn = jet::sum_cols(t, &gg);
    let eps2 = F::of(EPS_NORM * EPS_NORM);
    let valid = t.value(nn.v).mapv(|v| if v > eps2 { F::one() } else { F::zero() });
    let nn = jet::clamp_min(t, &nn, eps2);
    let len = jet::sqrt(t, &nn);
    let inv = jet::recip(t, &len);
    let normal = jet::mul(t, &g, &inv);

    let d = displacement(t, &x1, &b1);
    let mut s = d;
    if use_attenuation {
        let r = jet::scale(t, &b1, F::one() / nu);
        let r2 = jet::mul(t, &r, &r);
        let r4 = jet::mul(t, &r2, &r2);
        let den = jet::add_scalar(t, &r4, F::one());
        let chi = jet::recip(t, &den);
        s = jet::mul(t, &chi, &s);
    }
    if valid.iter().any(|&v| v == F::zero()) {
        let m = t.constant(valid);
        s = jet::mul_const(t, &s, m);
    }
    let step = jet::mul(t, &s, &normal);
    let y = jet::add(t, &x1, &step);
    let f = base.jet(t, base_vars, &y);
    let composed_field = FieldVars {
        value: f.v,
        grad: jet::gradient(t, &f),
    };
    (base_field, Some(composed_field))
}

/// Evaluates `field` on the `resolution³` lattice over `[−1, 1]³`
/// (x-fastest), in independent chunks.
pub fn eval_sdf_grid<F: Real, S: SdfField<F> + ?Sized>(field: &S, resolution: usize, cap: usize) -> Result<ScalarGrid> {
    if resolution < 2 {
        return Err(IdfError::Validation(format!("grid resolution must be at least 2, got {resolution}")));
    }
    if resolution > cap {
        return Err(IdfError::ResourceLimit(format!(
            "grid resolution {resolution} exceeds the configured cap {cap} ({} values)",
            resolution.pow(3)
        )));
    }
    let nodes = cube_nodes(resolution, -1.0, 1.0);
    let chunks: Vec<Result<Vec<f64>>> = nodes
        .par_chunks(GRID_CHUNK)
        .map(|chunk| {
            let x = Array2::from_shape_fn((chunk.len(), 3), |(i, k)| F::of(chunk[i][k]));
            Ok(field.sdf(x.view())?.iter().map(|v| v.f64()).collect())
        })
        .collect();
    let mut values = Vec::with_capacity(nodes.len());
    for c in chunks {
        values.extend(c?);
    }
    Ok(ScalarGrid::cube(resolution, -1.0, 1.0, values)?)
}
