//! The transferable displacement: a FiLM-conditioned sinusoidal network fed
//! with `tanh(f/ν)` and modulated by codes derived from grid features.

use std::rc::Rc;

use idf_geometry::OrientedPointCloud;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{IdfError, Result};
use crate::jet::{self, Jet};
use crate::loss::validate_normals;
use crate::model::{attenuation, base_normal, compose_on_tape, FieldVars, SdfField};
use crate::real::Real;
use crate::siren::{register, Head, SinusoidalNetwork, TanhMlp};
use crate::tape::{Csr, Tape, Var};

use super::grid::{rows_to_points, ConvStack, FeatureGrid, GridLayout, GridMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferNetConfig {
    pub grid_mode: GridMode,
    pub grid_resolution: usize,
    /// Grid feature channels.
    pub grid_channels: usize,
    pub conv_layers: usize,
    pub encoder_hidden: usize,
    pub mapping_hidden: usize,
    /// Hidden width of the displacement network (the code width).
    pub displacement_hidden: usize,
    pub displacement_depth: usize,
    pub omega_displacement: f64,
    pub alpha: f64,
    pub nu: f64,
    pub use_attenuation: bool,
}

impl Default for TransferNetConfig {
    fn default() -> Self {
        TransferNetConfig {
            grid_mode: GridMode::Volume,
            grid_resolution: 32,
            grid_channels: 32,
            conv_layers: 3,
            encoder_hidden: 32,
            mapping_hidden: 64,
            displacement_hidden: 64,
            displacement_depth: 3,
            omega_displacement: 60.0,
            alpha: 0.05,
            nu: 0.02,
            use_attenuation: true,
        }
    }
}

/// Learned transfer components; the base network is supplied separately.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferNets<F> {
    pub layout: GridLayout,
    pub encoder: TanhMlp<F>,
    pub conv: ConvStack<F>,
    pub mapping: TanhMlp<F>,
    pub displacement: SinusoidalNetwork<F>,
    pub alpha: f64,
    pub nu: f64,
    pub use_attenuation: bool,
}

/// Per-layer `(γ_i, β_i)`, each `n×C`.
pub type Codes<F> = Vec<(Array2<F>, Array2<F>)>;

impl<F: Real> TransferNets<F> {
    pub fn new(cfg: &TransferNetConfig, seed: u64) -> Result<Self> {
        if !(cfg.alpha > 0.0 && cfg.nu > 0.0) {
            return Err(IdfError::Config("alpha and nu must be positive".into()));
        }
        let layout = GridLayout::new(cfg.grid_mode, cfg.grid_resolution)?;
        let c = cfg.displacement_hidden;
        let depth = cfg.displacement_depth;
        let encoder = TanhMlp::init(&[3, cfg.encoder_hidden, cfg.encoder_hidden, cfg.grid_channels], seed)?;
        let conv = ConvStack::init(layout.dim(), cfg.grid_channels, cfg.conv_layers, seed.wrapping_add(1));
        let mut mapping = TanhMlp::init(&[cfg.grid_channels, cfg.mapping_hidden, cfg.mapping_hidden, 2 * depth * c], seed.wrapping_add(2))?;
        // start near the identity modulation
        if let Some(last) = mapping.layers.last_mut() {
            last.weight.mapv_inplace(|w| w * F::of(0.1));
        }
        let mut displacement = SinusoidalNetwork::init(1, c, depth, 1, cfg.omega_displacement, Head::ScaledTanh { alpha: cfg.alpha }, seed.wrapping_add(3))?;
        // f̄ varies by 1/ν per unit length at the surface, so a random head
        // would start with a displacement far steeper than the base
        displacement.zero_output_layer();
        Ok(TransferNets {
            layout,
            encoder,
            conv,
            mapping,
            displacement,
            alpha: cfg.alpha,
            nu: cfg.nu,
            use_attenuation: cfg.use_attenuation,
        })
    }

    pub fn code_width(&self) -> usize {
        self.displacement.hidden_dim
    }

    /// Per-point encoder features from unit normals.
    pub fn encode_points(&self, normals: ArrayView2<F>) -> Result<Array2<F>> {
        validate_normals(normals)?;
        self.encoder.forward(normals)
    }

    /// Scatter-mean of encoded cloud normals, then propagation.
    pub fn build_grid(&self, cloud: &OrientedPointCloud) -> Result<FeatureGrid<F>> {
        let normals = Array2::from_shape_fn((cloud.len(), 3), |(i, k)| F::of(cloud.normals[i][k]));
        let feats = self.encode_points(normals.view())?;
        let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let scattered = self.layout.scatter_matrix::<F>(&pts).apply(feats.view());
        let shifts = self.layout.shift_maps::<F>();
        Ok(FeatureGrid {
            layout: self.layout.clone(),
            features: self.conv.forward(&shifts, scattered.view()),
        })
    }

    /// Splits mapping output into per-layer codes.
    pub fn mapping_codes(&self, phi: ArrayView2<F>) -> Result<Codes<F>> {
        let out = self.mapping.forward(phi)?;
        let c = self.code_width();
        if out.ncols() != 2 * self.displacement.depth * c {
            return Err(IdfError::Shape(format!("mapping emits {} values, expected {}", out.ncols(), 2 * self.displacement.depth * c)));
        }
        Ok((0..self.displacement.depth)
            .map(|i| {
                let g = out.slice(s![.., 2 * i * c..(2 * i + 1) * c]).to_owned();
                let b = out.slice(s![.., (2 * i + 1) * c..(2 * i + 2) * c]).to_owned();
                (g, b)
            })
            .collect())
    }

    /// Conditioned displacement for scaled base values `fbar` (`n×1`).
    pub fn film_displacement(&self, fbar: ArrayView2<F>, codes: &Codes<F>) -> Result<Array1<F>> {
        if codes.len() != self.displacement.depth {
            return Err(IdfError::Shape(format!("{} code pairs for {} layers", codes.len(), self.displacement.depth)));
        }
        let views: Vec<_> = codes.iter().map(|(g, b)| (g.view(), b.view())).collect();
        Ok(self.displacement.forward_film(fbar, Some(&views))?.column(0).to_owned())
    }

    pub fn cast<G: Real>(&self) -> TransferNets<G> {
        TransferNets {
            layout: self.layout.clone(),
            encoder: self.encoder.cast(),
            conv: self.conv.cast(),
            mapping: self.mapping.cast(),
            displacement: self.displacement.cast(),
            alpha: self.alpha,
            nu: self.nu,
            use_attenuation: self.use_attenuation,
        }
    }
}

/// Parameter leaves of the trainable transfer components on one tape.
pub struct TransferVars {
    pub encoder: Vec<Var>,
    pub conv: Vec<Var>,
    pub mapping: Vec<Var>,
    pub displacement: Vec<Var>,
}

impl TransferVars {
    pub fn register<F: Real>(t: &mut Tape<F>, nets: &TransferNets<F>) -> Self {
        TransferVars {
            encoder: register(t, &nets.encoder, true),
            conv: register(t, &nets.conv, true),
            mapping: register(t, &nets.mapping, true),
            displacement: register(t, &nets.displacement, true),
        }
    }
}

/// Precomputed sparse maps for building the grid from a fixed cloud subset.
pub struct GridInputs<F> {
    pub normals: Array2<F>,
    pub scatter: Rc<Csr<F>>,
    pub shifts: Vec<Rc<Csr<F>>>,
}

impl<F: Real> GridInputs<F> {
    pub fn new(layout: &GridLayout, cloud: &OrientedPointCloud) -> Self {
        let pts: Vec<[f64; 3]> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
        GridInputs {
            normals: Array2::from_shape_fn((cloud.len(), 3), |(i, k)| F::of(cloud.normals[i][k])),
            scatter: Rc::new(layout.scatter_matrix(&pts)),
            shifts: layout.shift_maps().into_iter().map(Rc::new).collect(),
        }
    }
}

/// Composed base and transferred fields at `x` on the tape, with the
/// grid built on the same tape so every component receives gradients.
pub fn transfer_fields<F: Real>(
    t: &mut Tape<F>,
    base: &SinusoidalNetwork<F>,
    nets: &TransferNets<F>,
    vars: &TransferVars,
    grid: &GridInputs<F>,
    x: Array2<F>,
) -> Result<FieldVars> {
    let pts = rows_to_points(x.view())?;
    let interp = nets.layout.interpolation::<F>(&pts);
    let normals = t.constant(grid.normals.clone());
    let feats = nets.encoder.tape(t, &vars.encoder, normals);
    let scattered = t.sparse(grid.scatter.clone(), feats);
    let features = nets.conv.tape(t, &vars.conv, &grid.shifts, scattered);
    let base_vars = register(t, base, false);
    let nu = F::of(nets.nu);
    let (_, composed) = compose_on_tape(t, base, &base_vars, x, nu, nets.use_attenuation, true, |t, _x1, b1| {
        let phi = interp.jet(t, features);
        let codes = nets.mapping.jet(t, &vars.mapping, &phi);
        let c = nets.code_width();
        let pairs: Vec<(Jet, Jet)> = (0..nets.displacement.depth)
            .map(|i| (jet::slice_cols(t, &codes, 2 * i * c, c), jet::slice_cols(t, &codes, (2 * i + 1) * c, c)))
            .collect();
        let scaled = jet::scale(t, b1, F::one() / nu);
        let fbar = jet::tanh(t, &scaled);
        nets.displacement.jet_film(t, &vars.displacement, &fbar, Some(&pairs))
    });
    Ok(composed.expect("composed field requested"))
}

/// A base network paired with transfer components and a built grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferModel<F> {
    pub base: SinusoidalNetwork<F>,
    pub nets: TransferNets<F>,
    pub grid: FeatureGrid<F>,
}

impl<F: Real> TransferModel<F> {
    /// Attenuated displacement `χ(f)·T(f̄, M(φ))` at `x`.
    pub fn offset(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        let b = self.base.forward(x)?.column(0).to_owned();
        self.offset_given_base(x, &b)
    }

    fn offset_given_base(&self, x: ArrayView2<F>, b: &Array1<F>) -> Result<Array1<F>> {
        let nu = F::of(self.nets.nu);
        let (phi, _) = self.grid.query(x)?;
        let codes = self.nets.mapping_codes(phi.view())?;
        let fbar = b.mapv(|v| (v / nu).tanh()).insert_axis(Axis(1));
        let mut d = self.nets.film_displacement(fbar.view(), &codes)?;
        if self.nets.use_attenuation {
            d.zip_mut_with(b, |d, &v| *d = *d * attenuation(v, nu));
        }
        Ok(d)
    }

    pub fn compose_sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        let b = self.base.forward(x)?.column(0).to_owned();
        let n = base_normal(&self.base, x)?;
        let s = self.offset_given_base(x, &b)?;
        let y = &x + &(n * &s.insert_axis(Axis(1)));
        Ok(self.base.forward(y.view())?.column(0).to_owned())
    }
}

impl<F: Real> SdfField<F> for TransferModel<F> {
    fn sdf(&self, x: ArrayView2<F>) -> Result<Array1<F>> {
        self.compose_sdf(x)
    }
}
