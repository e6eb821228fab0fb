//! Progressive fitting of an [`IdfModel`] to an oriented point cloud, and
//! sphere pretraining of the base network.

use std::f64::consts::PI;
use std::path::Path;

use idf_geometry::OrientedPointCloud;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdfError, Result};
use crate::jet;
use crate::loss::{siren_loss, LossTerms, LossWeights};
use crate::model::IdfModel;
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::real::{Precision, Real};
use crate::siren::{collect_grads, register, SinusoidalNetwork};
use crate::tape::{Tape, Var};

/// `κ(t)`: 1 before `t_m`, then a half cosine down to 0 at `t = 1`.
pub fn progressive_blend(t: f64, t_m: f64) -> f64 {
    if t <= t_m {
        return 1.0;
    }
    let u = ((t - t_m) / (1.0 - t_m)).min(1.0);
    0.5 * (1.0 + (PI * u).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Eikonal, surface, normal and off-surface weights.
    pub lambdas: [f64; 4],
    pub offsurface_abs: bool,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the surface pool.
    pub steps_per_epoch: usize,
    pub batch_surface: usize,
    pub batch_offsurface: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub anneal_start_fraction: f64,
    /// Training fraction at which the displacement starts to blend in.
    pub progressive_start: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: [5.0, 400.0, 40.0, 50.0],
            offsurface_abs: true,
            epochs: 120,
            steps_per_epoch: 0,
            batch_surface: 4096,
            batch_offsurface: 4096,
            lr_init: 1e-4,
            lr_final: 1e-5,
            anneal_start_fraction: 0.8,
            progressive_start: 0.2,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        let [eikonal, surface, normal, offsurface] = self.lambdas;
        LossWeights {
            eikonal,
            surface,
            normal,
            offsurface,
            offsurface_abs: self.offsurface_abs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.progressive_start) {
            return Err(IdfError::Config(format!("progressive_start must lie in [0, 1), got {}", self.progressive_start)));
        }
        if !(0.0..=1.0).contains(&self.anneal_start_fraction) {
            return Err(IdfError::Config("anneal_start_fraction must lie in [0, 1]".into()));
        }
        if self.batch_surface == 0 {
            return Err(IdfError::Config("batch_surface must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !(self.lr_final >= 0.0) {
            return Err(IdfError::Config("learning rates must be positive".into()));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(IdfError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, pool: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            (pool / self.batch_surface.min(pool)).max(1)
        }
    }
}

/// What a fit optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Base and displacement, following the model's switches.
    Composed,
    /// The base network alone on its own loss; the displacement is untouched.
    BaseOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub eikonal: f64,
    pub surface_abs: f64,
    pub normal: f64,
    pub offsurface: f64,
    pub total: f64,
    pub kappa: f64,
    pub lr: f64,
}

/// Per-epoch means of the weighted loss terms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| IdfError::format(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| IdfError::format(path, e))?;
        }
        if self.records.is_empty() {
            w.write_record(["epoch", "eikonal", "surface_abs", "normal", "offsurface", "total", "kappa", "lr"])
                .map_err(|e| IdfError::format(path, e))?;
        }
        w.flush().map_err(|e| IdfError::io(path, e))
    }
}

/// State captured when a step produces a non-finite loss or gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NanDiagnostic {
    pub epoch: usize,
    pub step: usize,
    pub kappa: f64,
    pub lr: f64,
    pub terms: LossTerms,
    /// Euclidean norm of each parameter group's gradient.
    pub grad_norms: Vec<(String, f64)>,
}

/// Without-replacement surface batches (reshuffled every epoch) and fresh
/// uniform off-surface points.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(pool: usize, seed: u64) -> Self {
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..pool).collect(),
            cursor: pool,
        }
    }

    pub fn start_epoch(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn surface(&mut self, count: usize) -> Vec<usize> {
        let count = count.min(self.order.len());
        if self.cursor + count > self.order.len() {
            self.start_epoch();
        }
        let out = self.order[self.cursor..self.cursor + count].to_vec();
        self.cursor += count;
        out
    }

    pub fn offsurface(&mut self, count: usize) -> Vec<[f64; 3]> {
        (0..count)
            .map(|_| std::array::from_fn(|_| self.rng.random_range(-1.0..1.0)))
            .collect()
    }

    /// Query rows (surface first) and the surface normals.
    pub fn batch<F: Real>(&mut self, cloud: &OrientedPointCloud, n_surface: usize, n_off: usize) -> (Array2<F>, Array2<F>) {
        let idx = self.surface(n_surface);
        let off = self.offsurface(n_off);
        let ns = idx.len();
        let mut x = Array2::zeros((ns + off.len(), 3));
        let mut normals = Array2::zeros((ns, 3));
        for (r, &i) in idx.iter().enumerate() {
            for k in 0..3 {
                x[[r, k]] = F::of(cloud.points[i][k]);
                normals[[r, k]] = F::of(cloud.normals[i][k]);
            }
        }
        for (r, p) in off.iter().enumerate() {
            for k in 0..3 {
                x[[ns + r, k]] = F::of(p[k]);
            }
        }
        (x, normals)
    }
}

/// Euclidean norm over a list of arrays.
pub fn grad_norm<F: Real>(grads: &[Array2<F>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

#[derive(Default)]
struct EpochAccumulator {
    terms: LossTerms,
    steps: usize,
}

pub fn fit<F: Real>(model: &mut IdfModel<F>, cloud: &OrientedPointCloud, cfg: &TrainConfig, mode: FitMode) -> Result<History> {
    fit_with(model, cloud, cfg, mode, |_, _| Ok(()))
}

/// Runs the optimization, calling `on_epoch` after every epoch.
pub fn fit_with<F: Real>(
    model: &mut IdfModel<F>,
    cloud: &OrientedPointCloud,
    cfg: &TrainConfig,
    mode: FitMode,
    mut on_epoch: impl FnMut(&IdfModel<F>, &EpochRecord) -> Result<()>,
) -> Result<History> {
    cfg.validate()?;
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if cloud.is_empty() {
        return Err(IdfError::Validation("cannot fit an empty point cloud".into()));
    }
    cloud.validate()?;
    let weights = cfg.loss_weights();
    let steps_per_epoch = cfg.steps_per_epoch(cloud.len());
    let total_steps = cfg.epochs * steps_per_epoch;
    let progressive = model.switches.use_progressive;
    let mut sampler = BatchSampler::new(cloud.len(), cfg.seed);
    let mut adam_base = Adam::new(&model.base, AdamConfig::default());
    let mut adam_disp = Adam::new(&model.displacement, AdamConfig::default());

    for epoch in 0..cfg.epochs {
        sampler.start_epoch();
        let mut acc = EpochAccumulator::default();
        let (mut kappa, mut lr) = (1.0, cfg.lr_init);
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            let t = step as f64 / total_steps as f64;
            kappa = match mode {
                FitMode::BaseOnly => 1.0,
                FitMode::Composed if progressive => progressive_blend(t, cfg.progressive_start),
                FitMode::Composed => 0.0,
            };
            lr = learning_rate(t, cfg.lr_init, cfg.lr_final, cfg.anneal_start_fraction);
            let (lr_base, lr_disp) = match mode {
                FitMode::BaseOnly => (lr, 0.0),
                FitMode::Composed if progressive => (lr * kappa, lr * (1.0 - kappa)),
                FitMode::Composed => (lr, lr),
            };

            let (x, normals) = sampler.batch::<F>(cloud, cfg.batch_surface, cfg.batch_offsurface);
            let mut tape = Tape::new();
            let base_vars = register(&mut tape, &model.base, true);
            let composed = kappa < 1.0;
            let disp_vars = if composed {
                register(&mut tape, &model.displacement, true)
            } else {
                Vec::new()
            };
            let (base_field, composed_field) = model.tape_fields(&mut tape, &base_vars, &disp_vars, x, composed);

            let mut parts: Vec<Var> = Vec::new();
            let mut terms = LossTerms::default();
            if kappa > 0.0 {
                let l = siren_loss(&mut tape, base_field, &normals, &weights)?;
                terms = terms.add(&l.values(&tape).scaled(kappa));
                parts.push(tape.scale(l.total, F::of(kappa)));
            }
            if let Some(field) = composed_field {
                let l = siren_loss(&mut tape, field, &normals, &weights)?;
                terms = terms.add(&l.values(&tape).scaled(1.0 - kappa));
                parts.push(tape.scale(l.total, F::of(1.0 - kappa)));
            }
            let loss = if parts.len() == 2 { tape.add(parts[0], parts[1]) } else { parts[0] };

            let mut grads = tape.backward(loss)?;
            let gb = collect_grads(&mut grads, &base_vars, &model.base);
            let gd = if composed {
                collect_grads(&mut grads, &disp_vars, &model.displacement)
            } else {
                Vec::new()
            };
            let (nb, nd) = (grad_norm(&gb), grad_norm(&gd));
            if !terms.is_finite() || !nb.is_finite() || !nd.is_finite() {
                return Err(IdfError::NonFinite(Box::new(NanDiagnostic {
                    epoch,
                    step,
                    kappa,
                    lr,
                    terms,
                    grad_norms: vec![("base".into(), nb), ("displacement".into(), nd)],
                })));
            }
            adam_base.update(&mut model.base, &gb, lr_base);
            if composed {
                adam_disp.update(&mut model.displacement, &gd, lr_disp);
            }
            acc.terms = acc.terms.add(&terms);
            acc.steps += 1;
        }
        let mean = acc.terms.scaled(1.0 / acc.steps as f64);
        let record = EpochRecord {
            epoch,
            eikonal: mean.eikonal,
            surface_abs: mean.surface,
            normal: mean.normal,
            offsurface: mean.offsurface,
            total: mean.total(),
            kappa,
            lr,
        };
        on_epoch(model, &record)?;
        history.records.push(record);
    }
    Ok(history)
}

/// Fits a lone base network on its own loss.
pub fn fit_base<F: Real>(net: &mut SinusoidalNetwork<F>, cloud: &OrientedPointCloud, cfg: &TrainConfig) -> Result<History> {
    let placeholder = SinusoidalNetwork::init(3, 1, 1, 1, 1.0, crate::siren::Head::Linear, 0)?;
    let mut model = IdfModel {
        base: net.clone(),
        displacement: placeholder,
        alpha: 1.0,
        nu: 1.0,
        switches: crate::model::Switches::default(),
    };
    let h = fit(&mut model, cloud, cfg, FitMode::BaseOnly)?;
    *net = model.base;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub radius: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Mean absolute residual regarded as converged.
    pub threshold: f64,
    pub validation_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            radius: 0.5,
            steps: 500,
            batch: 2048,
            lr: 1e-3,
            seed: 0,
            threshold: 5e-3,
            validation_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub mean_abs_residual: f64,
    /// False when the residual stayed above the threshold; a warning, not an error.
    pub converged: bool,
}

/// L2 regression of `net` onto `‖x‖ − radius` over uniform samples of the
/// unit cube.
pub fn sphere_pretrain<F: Real>(net: &mut SinusoidalNetwork<F>, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if !(cfg.radius > 0.0 && cfg.radius < 1.0) {
        return Err(IdfError::Config(format!("pretraining radius must lie in (0, 1), got {}", cfg.radius)));
    }
    if net.in_dim != 3 || net.out_dim != 1 {
        return Err(IdfError::Shape("sphere pretraining expects a 3-D scalar network".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net, AdamConfig::default());
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let (x, target) = sphere_batch::<F>(cfg.batch, cfg.radius, &mut rng);
        let mut t = Tape::new();
        let vars = register(&mut t, net, true);
        let xj = jet::input(&mut t, x, 0);
        let out = net.jet(&mut t, &vars, &xj);
        let target = t.constant(target);
        let r = t.sub(out.v, target);
        let r = t.square(r);
        let loss = t.mean(r);
        final_loss = t.scalar(loss).f64();
        if !final_loss.is_finite() {
            return Err(IdfError::Numeric("sphere pretraining diverged".into()));
        }
        let mut grads = t.backward(loss)?;
        let g = collect_grads(&mut grads, &vars, net);
        // cosine decay to a tenth of the rate sharpens the fit near the apex
        let u = step as f64 / cfg.steps as f64;
        adam.update(net, &g, cfg.lr * (0.55 + 0.45 * (std::f64::consts::PI * u).cos()));
    }
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (x, target) = sphere_batch::<F>(cfg.validation_samples.max(1), cfg.radius, &mut vrng);
    let pred = net.forward(x.view())?;
    let residual = (&pred - &target).iter().map(|v| v.f64().abs()).sum::<f64>() / pred.len() as f64;
    Ok(PretrainReport {
        steps: cfg.steps,
        final_loss,
        mean_abs_residual: residual,
        converged: residual < cfg.threshold,
    })
}

fn sphere_batch<F: Real>(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> (Array2<F>, Array2<F>) {
    let x = Array2::<f64>::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0));
    let target = Array2::from_shape_fn((n, 1), |(i, _)| F::of(x.row(i).dot(&x.row(i)).sqrt() - radius));
    (x.mapv(F::of), target)
}
