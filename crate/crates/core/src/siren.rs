//! Sinusoidal networks and small tanh MLPs, with direct evaluation paths
//! for inference and tape paths for training.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdfError, Result};
use crate::jet::{self, Jet};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};

/// Affine map `x ↦ x·Wᵀ + b` with `W: out×in` and `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array2<F>,
}

impl<F: Real> Dense<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((output, input)),
            bias: Array2::zeros((1, output)),
        }
    }

    /// Weights uniform in `[-bound, bound]`, zero bias.
    pub fn uniform(input: usize, output: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let weight = Array2::from_shape_simple_fn((output, input), || F::of(rng.random_range(-bound..=bound)));
        Dense {
            weight,
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn apply_linear(&self, dx: ArrayView2<F>) -> Array2<F> {
        dx.dot(&self.weight.t())
    }

    fn record(&self) -> DenseRecord {
        DenseRecord {
            rows: self.weight.nrows(),
            cols: self.weight.ncols(),
            weight: self.weight.iter().map(|v| v.f64()).collect(),
            bias: self.bias.iter().map(|v| v.f64()).collect(),
        }
    }

    fn from_record(r: &DenseRecord) -> Result<Self> {
        if r.weight.len() != r.rows * r.cols || r.bias.len() != r.rows {
            return Err(IdfError::Shape(format!(
                "layer record {}x{} has {} weights and {} biases",
                r.rows,
                r.cols,
                r.weight.len(),
                r.bias.len()
            )));
        }
        let cast = |v: &[f64]| v.iter().map(|&x| F::of(x)).collect::<Vec<F>>();
        Ok(Dense {
            weight: Array2::from_shape_vec((r.rows, r.cols), cast(&r.weight)).expect("checked shape"),
            bias: Array2::from_shape_vec((1, r.rows), cast(&r.bias)).expect("checked shape"),
        })
    }
}

/// Serialized layer: row-major weights and biases stored as 64-bit floats
/// (exact for 32-bit parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseRecord {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn records<F: Real>(layers: &[Dense<F>]) -> Vec<DenseRecord> {
    layers.iter().map(Dense::record).collect()
}

pub fn from_records<F: Real>(records: &[DenseRecord]) -> Result<Vec<Dense<F>>> {
    records.iter().map(Dense::from_record).collect()
}

/// Anything with trainable arrays in a fixed order.
pub trait Module<F> {
    fn params(&self) -> Vec<&Array2<F>>;
    fn params_mut(&mut self) -> Vec<&mut Array2<F>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

fn layer_params<F>(layers: &[Dense<F>]) -> Vec<&Array2<F>> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

fn layer_params_mut<F>(layers: &mut [Dense<F>]) -> Vec<&mut Array2<F>> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}

/// Places a module's parameters on the tape, as trainable leaves or as
/// constants.
pub fn register<F: Real, M: Module<F> + ?Sized>(t: &mut Tape<F>, m: &M, trainable: bool) -> Vec<Var> {
    m.params()
        .into_iter()
        .map(|p| if trainable { t.param(p.clone()) } else { t.constant(p.clone()) })
        .collect()
}

/// Parameter gradients in module order (zeros where the loss did not reach).
pub fn collect_grads<F: Real, M: Module<F> + ?Sized>(grads: &mut Gradients<F>, vars: &[Var], m: &M) -> Vec<Array2<F>> {
    vars.iter()
        .zip(m.params())
        .map(|(&v, p)| grads.take_or_zeros(v, p.dim()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    Linear,
    ScaledTanh { alpha: f64 },
}

/// Per-layer FiLM modulation `(1 + ½γ)∘z + β` applied to hidden
/// pre-activations; each entry is `n×hidden` (or `1×hidden`).
pub type FilmCodes<'a, F> = &'a [(ArrayView2<'a, F>, ArrayView2<'a, F>)];

#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidalNetwork<F> {
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Number of hidden sine layers.
    pub depth: usize,
    pub out_dim: usize,
    pub omega: F,
    pub head: Head,
    /// `depth` sine layers followed by the output layer.
    pub layers: Vec<Dense<F>>,
}

/// Values, input gradients and optional parameter gradients of a scalar
/// network on a batch.
#[derive(Debug, Clone)]
pub struct DualBatch<F> {
    /// `n×out`.
    pub values: Array2<F>,
    /// `n×in`, gradient of the (single) output.
    pub input_grads: Array2<F>,
    pub param_grads: Option<Vec<Array2<F>>>,
}

impl<F: Real> Module<F> for SinusoidalNetwork<F> {
    fn params(&self) -> Vec<&Array2<F>> {
        layer_params(&self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        layer_params_mut(&mut self.layers)
    }
}

/// Half-width of the uniform init for layers after the first.
pub fn hidden_init_bound(fan_in: usize, omega: f64) -> f64 {
    (6.0 / fan_in as f64).sqrt() / omega
}

impl<F: Real> SinusoidalNetwork<F> {
    /// First layer `U[−1/in, 1/in]`, later layers `U[±√(6/fan_in)/ω]`,
    /// zero biases.
    pub fn init(in_dim: usize, hidden_dim: usize, depth: usize, out_dim: usize, omega: f64, head: Head, seed: u64) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || depth == 0 || out_dim == 0 {
            return Err(IdfError::Config(format!(
                "network dims must be positive (in {in_dim}, hidden {hidden_dim}, depth {depth}, out {out_dim})"
            )));
        }
        if !(omega > 0.0) || !omega.is_finite() {
            return Err(IdfError::Config(format!("omega must be positive, got {omega}")));
        }
        if let Head::ScaledTanh { alpha } = head {
            if !(alpha > 0.0) {
                return Err(IdfError::Config(format!("tanh head scale must be positive, got {alpha}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Dense::uniform(in_dim, hidden_dim, 1.0 / in_dim as f64, &mut rng)];
        for _ in 1..depth {
            layers.push(Dense::uniform(hidden_dim, hidden_dim, hidden_init_bound(hidden_dim, omega), &mut rng));
        }
        layers.push(Dense::uniform(hidden_dim, out_dim, hidden_init_bound(hidden_dim, omega), &mut rng));
        Ok(SinusoidalNetwork {
            in_dim,
            hidden_dim,
            depth,
            out_dim,
            omega: F::of(omega),
            head,
            layers,
        })
    }

    /// Builds a network from explicit layers, checking that shapes compose.
    pub fn from_layers(layers: Vec<Dense<F>>, omega: F, head: Head) -> Result<Self> {
        if layers.len() < 2 {
            return Err(IdfError::Shape("a sinusoidal network needs at least one hidden layer and an output layer".into()));
        }
        let net = SinusoidalNetwork {
            in_dim: layers[0].input_dim(),
            hidden_dim: layers[0].output_dim(),
            depth: layers.len() - 1,
            out_dim: layers.last().expect("non-empty").output_dim(),
            omega,
            head,
            layers,
        };
        net.check()?;
        Ok(net)
    }

    /// Composability of layer shapes.
    pub fn check(&self) -> Result<()> {
        if !(self.omega > F::zero()) {
            return Err(IdfError::Config(format!("omega must be positive, got {}", self.omega)));
        }
        if self.layers.len() != self.depth + 1 {
            return Err(IdfError::Shape(format!("{} layers for depth {}", self.layers.len(), self.depth)));
        }
        let mut width = self.in_dim;
        for (i, l) in self.layers.iter().enumerate() {
            let expected_out = if i == self.depth { self.out_dim } else { self.hidden_dim };
            if l.input_dim() != width || l.output_dim() != expected_out || l.bias.dim() != (1, expected_out) {
                return Err(IdfError::Shape(format!(
                    "layer {i} is {}x{} (bias {:?}), expected {expected_out}x{width}",
                    l.output_dim(),
                    l.input_dim(),
                    l.bias.dim()
                )));
            }
            width = expected_out;
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(IdfError::Shape(format!("network expects {} input columns, got {}", self.in_dim, x.ncols())));
        }
        Ok(())
    }

    fn check_codes(&self, codes: Option<FilmCodes<F>>) -> Result<()> {
        if let Some(c) = codes {
            if c.len() != self.depth {
                return Err(IdfError::Shape(format!("{} FiLM code pairs for {} hidden layers", c.len(), self.depth)));
            }
            for (g, b) in c {
                if g.ncols() != self.hidden_dim || b.ncols() != self.hidden_dim {
                    return Err(IdfError::Shape(format!("FiLM codes must have {} columns", self.hidden_dim)));
                }
            }
        }
        Ok(())
    }

    fn modulate(z: &mut Array2<F>, code: Option<&(ArrayView2<F>, ArrayView2<F>)>) {
        if let Some((gamma, beta)) = code {
            let half = F::of(0.5);
            *z = &*z * &gamma.mapv(|g| F::one() + half * g) + beta;
        }
    }

    fn head_value(&self, z: Array2<F>) -> Array2<F> {
        match self.head {
            Head::Linear => z,
            Head::ScaledTanh { alpha } => {
                let a = F::of(alpha);
                z.mapv(|v| a * v.tanh())
            }
        }
    }

    /// Network output `n×out`.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.forward_film(x, None)
    }

    /// Output with optional FiLM modulation of every hidden layer.
    pub fn forward_film(&self, x: ArrayView2<F>, codes: Option<FilmCodes<F>>) -> Result<Array2<F>> {
        self.check_input(&x)?;
        self.check_codes(codes)?;
        let mut h = x.to_owned();
        for (i, layer) in self.layers[..self.depth].iter().enumerate() {
            let mut z = layer.apply(h.view());
            Self::modulate(&mut z, codes.map(|c| &c[i]));
            let w = self.omega;
            z.mapv_inplace(|v| (w * v).sin());
            h = z;
        }
        let z = self.layers[self.depth].apply(h.view());
        Ok(self.head_value(z))
    }

    /// Values and analytic input gradients (forward-mode chain rule).
    pub fn forward_with_gradient(&self, x: ArrayView2<F>) -> Result<DualBatch<F>> {
        self.check_input(&x)?;
        if self.out_dim != 1 {
            return Err(IdfError::Shape("input gradients are defined for scalar networks".into()));
        }
        let n = x.nrows();
        let mut h = x.to_owned();
        // tangent of h along each input axis
        let mut dh: Vec<Array2<F>> = (0..self.in_dim)
            .map(|k| {
                let mut e = Array2::zeros((1, self.in_dim));
                e[[0, k]] = F::one();
                e
            })
            .collect();
        let w = self.omega;
        for layer in &self.layers[..self.depth] {
            let z = layer.apply(h.view());
            let scale = z.mapv(|v| w * (w * v).cos());
            for d in dh.iter_mut() {
                *d = layer.apply_linear(d.view()) * &scale;
            }
            h = z.mapv(|v| (w * v).sin());
        }
        let last = &self.layers[self.depth];
        let z = last.apply(h.view());
        let mut grads = Array2::zeros((n, self.in_dim));
        let head_slope = match self.head {
            Head::Linear => Array2::ones((n, 1)),
            Head::ScaledTanh { alpha } => {
                let a = F::of(alpha);
                z.mapv(|v| {
                    let t = v.tanh();
                    a * (F::one() - t * t)
                })
            }
        };
        for (k, d) in dh.iter().enumerate() {
            let dz = last.apply_linear(d.view());
            let col = &dz.column(0) * &head_slope.column(0);
            grads.column_mut(k).assign(&col);
        }
        Ok(DualBatch {
            values: self.head_value(z),
            input_grads: grads,
            param_grads: None,
        })
    }

    pub fn input_gradient(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.forward_with_gradient(x)?.input_grads)
    }

    /// Tape evaluation on a jet of the input; `vars` from [`register`].
    pub fn jet(&self, t: &mut Tape<F>, vars: &[Var], x: &Jet) -> Jet {
        self.jet_film(t, vars, x, None)
    }

    /// Tape evaluation with FiLM codes given as jets `(γ_i, β_i)`.
    pub fn jet_film(&self, t: &mut Tape<F>, vars: &[Var], x: &Jet, codes: Option<&[(Jet, Jet)]>) -> Jet {
        assert_eq!(vars.len(), 2 * self.layers.len(), "parameter vars do not match network");
        let mut h = x.clone();
        for i in 0..self.depth {
            let mut z = jet::affine(t, &h, vars[2 * i], vars[2 * i + 1]);
            if let Some(codes) = codes {
                let (gamma, beta) = &codes[i];
                let half = jet::scale(t, gamma, F::of(0.5));
                let factor = jet::add_scalar(t, &half, F::one());
                let scaled = jet::mul(t, &factor, &z);
                z = jet::add(t, &scaled, beta);
            }
            h = jet::sin(t, &z, self.omega);
        }
        let d = self.depth;
        let z = jet::affine(t, &h, vars[2 * d], vars[2 * d + 1]);
        match self.head {
            Head::Linear => z,
            Head::ScaledTanh { alpha } => {
                let th = jet::tanh(t, &z);
                jet::scale(t, &th, F::of(alpha))
            }
        }
    }

    /// Evaluates on the tape with order-1 jets, builds a loss from the output
    /// jet, and returns values, input gradients and parameter gradients.
    pub fn dual(&self, x: ArrayView2<F>, loss: impl FnOnce(&mut Tape<F>, &Jet) -> Var) -> Result<DualBatch<F>> {
        self.check_input(&x)?;
        if self.in_dim != 3 || self.out_dim != 1 {
            return Err(IdfError::Shape("tape evaluation expects a 3-D scalar field".into()));
        }
        let mut t = Tape::new();
        let vars = register(&mut t, self, true);
        let xj = jet::input(&mut t, x.to_owned(), 1);
        let out = self.jet(&mut t, &vars, &xj);
        let l = loss(&mut t, &out);
        let mut grads = t.backward(l)?;
        let values = t.value(out.v).clone();
        let n = values.nrows();
        let mut input_grads = Array2::zeros((n, 3));
        for k in 0..3 {
            let d = t.value(out.d1[k]);
            input_grads
                .column_mut(k)
                .assign(&d.column(0).broadcast(n).expect("broadcast gradient column"));
        }
        Ok(DualBatch {
            values,
            input_grads,
            param_grads: Some(collect_grads(&mut grads, &vars, self)),
        })
    }

    /// Largest weight magnitude of each layer.
    pub fn max_abs_weights(&self) -> Vec<F> {
        self.layers
            .iter()
            .map(|l| l.weight.iter().fold(F::zero(), |m, &w| m.max(w.abs())))
            .collect()
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("output layer");
        last.weight.fill(F::zero());
        last.bias.fill(F::zero());
    }

    pub fn cast<G: Real>(&self) -> SinusoidalNetwork<G> {
        SinusoidalNetwork {
            in_dim: self.in_dim,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            out_dim: self.out_dim,
            omega: G::of(self.omega.f64()),
            head: self.head,
            layers: cast_layers(&self.layers),
        }
    }

    pub fn to_checkpoint(&self) -> NetworkCheckpoint {
        NetworkCheckpoint {
            format_version: CHECKPOINT_VERSION,
            kind: "sinusoidal".into(),
            in_dim: self.in_dim,
            hidden_dim: self.hidden_dim,
            depth: self.depth,
            out_dim: self.out_dim,
            omega: self.omega.f64(),
            head: self.head,
            layers: records(&self.layers),
        }
    }

    pub fn from_checkpoint(c: &NetworkCheckpoint) -> Result<Self> {
        if c.format_version != CHECKPOINT_VERSION {
            return Err(IdfError::Validation(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.format_version
            )));
        }
        let net = SinusoidalNetwork {
            in_dim: c.in_dim,
            hidden_dim: c.hidden_dim,
            depth: c.depth,
            out_dim: c.out_dim,
            omega: F::of(c.omega),
            head: c.head,
            layers: from_records(&c.layers)?,
        };
        net.check()?;
        Ok(net)
    }
}

pub fn cast_layers<F: Real, G: Real>(layers: &[Dense<F>]) -> Vec<Dense<G>> {
    layers
        .iter()
        .map(|l| Dense {
            weight: l.weight.mapv(|v| G::of(v.f64())),
            bias: l.bias.mapv(|v| G::of(v.f64())),
        })
        .collect()
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub out_dim: usize,
    pub omega: f64,
    pub head: Head,
    pub layers: Vec<DenseRecord>,
}

/// Multi-layer perceptron with tanh between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhMlp<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Real> Module<F> for TanhMlp<F> {
    fn params(&self) -> Vec<&Array2<F>> {
        layer_params(&self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<F>> {
        layer_params_mut(&mut self.layers)
    }
}

impl<F: Real> TanhMlp<F> {
    /// Glorot-uniform weights, zero biases. `widths` lists every layer
    /// width from input to output.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(IdfError::Config(format!("invalid MLP widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| Dense::uniform(w[0], w[1], (6.0 / (w[0] + w[1]) as f64).sqrt(), &mut rng))
            .collect();
        Ok(TanhMlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        if x.ncols() != self.input_dim() {
            return Err(IdfError::Shape(format!("MLP expects {} input columns, got {}", self.input_dim(), x.ncols())));
        }
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(h.view());
            if i < last {
                h.mapv_inplace(F::tanh);
            }
        }
        Ok(h)
    }

    pub fn jet(&self, t: &mut Tape<F>, vars: &[Var], x: &Jet) -> Jet {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = jet::affine(t, &h, vars[2 * i], vars[2 * i + 1]);
            if i < last {
                h = jet::tanh(t, &h);
            }
        }
        h
    }

    /// Tape evaluation on a plain (non-jet) batch.
    pub fn tape(&self, t: &mut Tape<F>, vars: &[Var], x: Var) -> Var {
        self.jet(t, vars, &Jet::constant(x)).v
    }

    pub fn cast<G: Real>(&self) -> TanhMlp<G> {
        TanhMlp {
            layers: cast_layers(&self.layers),
        }
    }
}

/// Column-sliced view helper: rows `start..start+len` of a batch.
pub fn rows<F: Real>(a: &Array2<F>, start: usize, len: usize) -> ArrayView2<'_, F> {
    a.slice(s![start..start + len, ..])
}

/// Stacks 1-D columns into an `n×k` array.
pub fn stack_columns<F: Real>(cols: &[Array2<F>]) -> Array2<F> {
    let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("equal row counts")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_points(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = SinusoidalNetwork::<f32>::init(3, 256, 4, 1, 15.0, Head::Linear, 7).unwrap();
        let b = SinusoidalNetwork::<f32>::init(3, 256, 4, 1, 15.0, Head::Linear, 7).unwrap();
        assert_eq!(a, b);
        let c = SinusoidalNetwork::<f64>::init(3, 256, 4, 1, 60.0, Head::Linear, 3).unwrap();
        let bound = (6.0f64 / 256.0).sqrt() / 60.0;
        for m in &c.max_abs_weights()[1..] {
            assert!(*m <= bound);
        }
        assert!(c.max_abs_weights()[0] <= 1.0 / 3.0);
        assert!(c.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn invalid_configuration_rejected() {
        assert!(matches!(
            SinusoidalNetwork::<f64>::init(3, 16, 0, 1, 15.0, Head::Linear, 0),
            Err(IdfError::Config(_))
        ));
        assert!(matches!(
            SinusoidalNetwork::<f64>::init(3, 16, 2, 1, 0.0, Head::Linear, 0),
            Err(IdfError::Config(_))
        ));
    }

    #[test]
    fn closed_form_single_layer() {
        let net = SinusoidalNetwork::from_layers(
            vec![
                Dense {
                    weight: array![[1.0]],
                    bias: array![[0.0]],
                },
                Dense {
                    weight: array![[1.0]],
                    bias: array![[0.0]],
                },
            ],
            1.0,
            Head::Linear,
        )
        .unwrap();
        let y = net.forward(array![[std::f64::consts::FRAC_PI_2]].view()).unwrap();
        assert_eq!(y[[0, 0]], 1.0);
        let g = net.input_gradient(array![[0.0]].view()).unwrap();
        assert_eq!(g[[0, 0]], 1.0);
    }

    #[test]
    fn zero_output_layer_gives_bias() {
        let mut net = SinusoidalNetwork::<f64>::init(3, 32, 2, 1, 15.0, Head::Linear, 1).unwrap();
        net.zero_output_layer();
        net.layers[2].bias[[0, 0]] = 0.25;
        let x = random_points(50, 2);
        assert!(net.forward(x.view()).unwrap().iter().all(|&v| v == 0.25));
        assert!(net.input_gradient(x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_direct_paths_agree() {
        let net = SinusoidalNetwork::<f64>::init(3, 24, 3, 1, 15.0, Head::ScaledTanh { alpha: 0.05 }, 9).unwrap();
        let x = random_points(40, 3);
        let direct = net.forward_with_gradient(x.view()).unwrap();
        let taped = net.dual(x.view(), |t, j| t.sum(j.v)).unwrap();
        for (a, b) in direct.values.iter().zip(taped.values.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in direct.input_grads.iter().zip(taped.input_grads.iter()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn film_identity_codes_are_exact() {
        let net = SinusoidalNetwork::<f64>::init(1, 16, 3, 1, 60.0, Head::ScaledTanh { alpha: 0.05 }, 4).unwrap();
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64 / 10.0 - 1.0);
        let zero = Array2::zeros((20, 16));
        let codes: Vec<_> = (0..3).map(|_| (zero.view(), zero.view())).collect();
        assert_eq!(net.forward(x.view()).unwrap(), net.forward_film(x.view(), Some(&codes)).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = SinusoidalNetwork::<f32>::init(3, 20, 2, 1, 30.0, Head::ScaledTanh { alpha: 0.05 }, 5).unwrap();
        let text = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = SinusoidalNetwork::<f32>::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, net);
        let x = random_points(10, 1).mapv(|v| v as f32);
        assert_eq!(back.forward(x.view()).unwrap(), net.forward(x.view()).unwrap());
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let net = SinusoidalNetwork::<f64>::init(3, 8, 2, 1, 15.0, Head::Linear, 0).unwrap();
        assert!(matches!(net.forward(Array2::zeros((2, 2)).view()), Err(IdfError::Shape(_))));
        let mut bad = net.clone();
        bad.layers[1] = Dense::zeros(7, 8);
        assert!(bad.check().is_err());
    }
}
