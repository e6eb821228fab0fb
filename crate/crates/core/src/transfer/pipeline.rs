//! Detail transfer in four steps: fit a source base, fit the transfer
//! components against it, fit a target base, and swap the target base in.

use std::path::Path;

use idf_geometry::OrientedPointCloud;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdfError, Result};
use crate::loss::siren_loss;
use crate::model::{read_json, write_json};
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::real::Real;
use crate::siren::{collect_grads, from_records, records, DenseRecord, Head, NetworkCheckpoint, SinusoidalNetwork, TanhMlp};
use crate::tape::Tape;
use crate::train::{fit_base, grad_norm, sphere_pretrain, BatchSampler, EpochRecord, History, NanDiagnostic, PretrainConfig, TrainConfig};

use super::grid::{ConvStack, FeatureGrid, GridLayout};
use super::model::{transfer_fields, GridInputs, TransferModel, TransferNetConfig, TransferNets, TransferVars};

pub const TRANSFER_BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseNetConfig {
    pub hidden: usize,
    pub depth: usize,
    pub omega: f64,
}

impl Default for BaseNetConfig {
    /// Low frequency and modest width keep the base from absorbing detail.
    fn default() -> Self {
        BaseNetConfig {
            hidden: 96,
            depth: 3,
            omega: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub base: BaseNetConfig,
    pub nets: TransferNetConfig,
    pub pretrain_base: bool,
    pub pretrain: PretrainConfig,
    pub base_train: TrainConfig,
    pub transfer_train: TrainConfig,
    /// Cloud points scattered into the grid, redrawn every epoch.
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            base: BaseNetConfig::default(),
            nets: TransferNetConfig::default(),
            pretrain_base: true,
            pretrain: PretrainConfig::default(),
            base_train: TrainConfig::default(),
            transfer_train: TrainConfig::default(),
            grid_points: 4096,
            seed: 0,
        }
    }
}

/// Pipeline state; each step checks that its prerequisites ran.
pub struct TransferPipeline<F> {
    pub config: TransferConfig,
    pub source_base: Option<SinusoidalNetwork<F>>,
    pub nets: Option<TransferNets<F>>,
    pub target_base: Option<SinusoidalNetwork<F>>,
    pub histories: Vec<(String, History)>,
}

impl<F: Real> TransferPipeline<F> {
    pub fn new(config: TransferConfig) -> Self {
        TransferPipeline {
            config,
            source_base: None,
            nets: None,
            target_base: None,
            histories: Vec::new(),
        }
    }

    fn train_base(&mut self, cloud: &OrientedPointCloud, seed: u64, label: &str) -> Result<SinusoidalNetwork<F>> {
        let c = &self.config.base;
        let mut net = SinusoidalNetwork::init(3, c.hidden, c.depth, 1, c.omega, Head::Linear, seed)?;
        if self.config.pretrain_base {
            sphere_pretrain(&mut net, &self.config.pretrain)?;
        }
        let h = fit_base(&mut net, cloud, &self.config.base_train)?;
        self.histories.push((label.into(), h));
        Ok(net)
    }

    /// Step 1: base network of the source (or its base cloud).
    pub fn fit_source_base(&mut self, cloud: &OrientedPointCloud) -> Result<()> {
        let net = self.train_base(cloud, self.config.seed, "source_base")?;
        self.source_base = Some(net);
        Ok(())
    }

    /// Step 2: transfer components on the detailed source with the source
    /// base frozen; the grid is built from `grid_cloud`.
    pub fn fit_displacement(&mut self, source: &OrientedPointCloud, grid_cloud: &OrientedPointCloud) -> Result<()> {
        let base = self
            .source_base
            .as_ref()
            .ok_or_else(|| IdfError::PipelineOrder("the source base must be fitted before the displacement".into()))?;
        let mut nets = TransferNets::new(&self.config.nets, self.config.seed.wrapping_add(17))?;
        let h = fit_transfer(base, &mut nets, source, grid_cloud, &self.config.transfer_train, self.config.grid_points)?;
        self.histories.push(("displacement".into(), h));
        self.nets = Some(nets);
        Ok(())
    }

    /// Step 3: base network of the target (or its base cloud).
    pub fn fit_target_base(&mut self, cloud: &OrientedPointCloud) -> Result<()> {
        let net = self.train_base(cloud, self.config.seed, "target_base")?;
        self.target_base = Some(net);
        Ok(())
    }

    /// Step 4: the target base with the transfer components, grid built
    /// from `grid_cloud`. No further training.
    pub fn assemble(&self, grid_cloud: &OrientedPointCloud) -> Result<TransferModel<F>> {
        let nets = self
            .nets
            .as_ref()
            .ok_or_else(|| IdfError::PipelineOrder("the displacement must be fitted before assembling".into()))?;
        let base = self
            .target_base
            .as_ref()
            .ok_or_else(|| IdfError::PipelineOrder("the target base must be fitted before assembling".into()))?;
        Ok(TransferModel {
            base: base.clone(),
            nets: nets.clone(),
            grid: nets.build_grid(grid_cloud)?,
        })
    }

    /// The source base with the transfer components, as fitted in step 2.
    pub fn source_model(&self, grid_cloud: &OrientedPointCloud) -> Result<TransferModel<F>> {
        let (Some(base), Some(nets)) = (&self.source_base, &self.nets) else {
            return Err(IdfError::PipelineOrder("source base and displacement must be fitted first".into()));
        };
        Ok(TransferModel {
            base: base.clone(),
            nets: nets.clone(),
            grid: nets.build_grid(grid_cloud)?,
        })
    }
}

/// Clouds for a transfer run. Base clouds, when given, drive base fitting
/// and grid construction for their side.
pub struct TransferInputs<'a> {
    pub source: &'a OrientedPointCloud,
    pub target: &'a OrientedPointCloud,
    pub source_base: Option<&'a OrientedPointCloud>,
    pub target_base: Option<&'a OrientedPointCloud>,
}

/// Runs all four steps.
pub fn transfer_pipeline<F: Real>(inputs: &TransferInputs, config: &TransferConfig) -> Result<(TransferModel<F>, TransferPipeline<F>)> {
    let mut p = TransferPipeline::new(config.clone());
    let source_base = inputs.source_base.unwrap_or(inputs.source);
    let target_base = inputs.target_base.unwrap_or(inputs.target);
    p.fit_source_base(source_base)?;
    p.fit_displacement(inputs.source, source_base)?;
    p.fit_target_base(target_base)?;
    let model = p.assemble(target_base)?;
    Ok((model, p))
}

/// Trains encoder, propagation, mapping and displacement on `source` with
/// `base` frozen. The grid subset is redrawn each epoch and the grid is
/// rebuilt on every step's tape.
pub fn fit_transfer<F: Real>(
    base: &SinusoidalNetwork<F>,
    nets: &mut TransferNets<F>,
    source: &OrientedPointCloud,
    grid_cloud: &OrientedPointCloud,
    cfg: &TrainConfig,
    grid_points: usize,
) -> Result<History> {
    cfg.validate()?;
    let mut history = History::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if source.is_empty() || grid_cloud.is_empty() {
        return Err(IdfError::Validation("transfer needs non-empty source and grid clouds".into()));
    }
    source.validate()?;
    grid_cloud.validate()?;
    let weights = cfg.loss_weights();
    let steps_per_epoch = cfg.steps_per_epoch(source.len());
    let total = cfg.epochs * steps_per_epoch;
    let mut sampler = BatchSampler::new(source.len(), cfg.seed);
    let mut grid_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6772_6964);
    let adam = AdamConfig::default();
    let mut opt = (
        Adam::new(&nets.encoder, adam),
        Adam::new(&nets.conv, adam),
        Adam::new(&nets.mapping, adam),
        Adam::new(&nets.displacement, adam),
    );
    for epoch in 0..cfg.epochs {
        sampler.start_epoch();
        let m = grid_points.clamp(1, grid_cloud.len());
        let mut idx = sample(&mut grid_rng, grid_cloud.len(), m).into_vec();
        idx.sort_unstable();
        let grid = GridInputs::<F>::new(&nets.layout, &grid_cloud.select(&idx));
        let mut sums = crate::loss::LossTerms::default();
        let mut lr = cfg.lr_init;
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            lr = learning_rate(step as f64 / total as f64, cfg.lr_init, cfg.lr_final, cfg.anneal_start_fraction);
            let (x, normals) = sampler.batch::<F>(source, cfg.batch_surface, cfg.batch_offsurface);
            let mut t = Tape::new();
            let vars = TransferVars::register(&mut t, nets);
            let field = transfer_fields(&mut t, base, nets, &vars, &grid, x)?;
            let l = siren_loss(&mut t, field, &normals, &weights)?;
            let terms = l.values(&t);
            let mut g = t.backward(l.total)?;
            let ge = collect_grads(&mut g, &vars.encoder, &nets.encoder);
            let gc = collect_grads(&mut g, &vars.conv, &nets.conv);
            let gm = collect_grads(&mut g, &vars.mapping, &nets.mapping);
            let gd = collect_grads(&mut g, &vars.displacement, &nets.displacement);
            let norms = [("encoder", grad_norm(&ge)), ("conv", grad_norm(&gc)), ("mapping", grad_norm(&gm)), ("displacement", grad_norm(&gd))];
            if !terms.is_finite() || norms.iter().any(|(_, n)| !n.is_finite()) {
                return Err(IdfError::NonFinite(Box::new(NanDiagnostic {
                    epoch,
                    step,
                    kappa: 0.0,
                    lr,
                    terms,
                    grad_norms: norms.iter().map(|(k, n)| (k.to_string(), *n)).collect(),
                })));
            }
            opt.0.update(&mut nets.encoder, &ge, lr);
            opt.1.update(&mut nets.conv, &gc, lr);
            opt.2.update(&mut nets.mapping, &gm, lr);
            opt.3.update(&mut nets.displacement, &gd, lr);
            sums = sums.add(&terms);
        }
        let mean = sums.scaled(1.0 / steps_per_epoch as f64);
        history.records.push(EpochRecord {
            epoch,
            eikonal: mean.eikonal,
            surface_abs: mean.surface,
            normal: mean.normal,
            offsurface: mean.offsurface,
            total: mean.total(),
            kappa: 0.0,
            lr,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStackCheckpoint {
    pub format_version: u32,
    pub kind: String,
    pub layers: Vec<DenseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFeatures {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub format_version: u32,
    pub layout: GridLayout,
    pub alpha: f64,
    pub nu: f64,
    pub use_attenuation: bool,
}

impl<F: Real> TransferModel<F> {
    pub fn save_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| IdfError::io(dir, e))?;
        let stack = |kind: &str, layers| LayerStackCheckpoint {
            format_version: TRANSFER_BUNDLE_VERSION,
            kind: kind.into(),
            layers,
        };
        write_json(&dir.join("base.json"), &self.base.to_checkpoint())?;
        write_json(&dir.join("displacement.json"), &self.nets.displacement.to_checkpoint())?;
        write_json(&dir.join("encoder.json"), &stack("encoder", records(&self.nets.encoder.layers)))?;
        write_json(&dir.join("propagation.json"), &stack("propagation", records(&self.nets.conv.layers)))?;
        write_json(&dir.join("mapping.json"), &stack("mapping", records(&self.nets.mapping.layers)))?;
        let f = &self.grid.features;
        write_json(
            &dir.join("features.json"),
            &GridFeatures {
                rows: f.nrows(),
                cols: f.ncols(),
                values: f.iter().map(|v| v.f64()).collect(),
            },
        )?;
        write_json(
            &dir.join("manifest.json"),
            &TransferManifest {
                format_version: TRANSFER_BUNDLE_VERSION,
                layout: self.nets.layout.clone(),
                alpha: self.nets.alpha,
                nu: self.nets.nu,
                use_attenuation: self.nets.use_attenuation,
            },
        )
    }

    pub fn load_bundle(dir: &Path) -> Result<Self> {
        let manifest: TransferManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != TRANSFER_BUNDLE_VERSION {
            return Err(IdfError::format(dir.join("manifest.json"), "unsupported transfer bundle version"));
        }
        let layers = |name: &str| -> Result<Vec<crate::siren::Dense<F>>> {
            let c: LayerStackCheckpoint = read_json(&dir.join(name))?;
            from_records(&c.layers)
        };
        let base: NetworkCheckpoint = read_json(&dir.join("base.json"))?;
        let disp: NetworkCheckpoint = read_json(&dir.join("displacement.json"))?;
        let feats: GridFeatures = read_json(&dir.join("features.json"))?;
        let features = Array2::from_shape_vec((feats.rows, feats.cols), feats.values.into_iter().map(F::of).collect())
            .map_err(|e| IdfError::format(dir.join("features.json"), e))?;
        if features.nrows() != manifest.layout.node_count() {
            return Err(IdfError::format(dir.join("features.json"), "feature rows do not match the grid"));
        }
        let nets = TransferNets {
            layout: manifest.layout.clone(),
            encoder: TanhMlp { layers: layers("encoder.json")? },
            conv: ConvStack { layers: layers("propagation.json")? },
            mapping: TanhMlp { layers: layers("mapping.json")? },
            displacement: SinusoidalNetwork::from_checkpoint(&disp)?,
            alpha: manifest.alpha,
            nu: manifest.nu,
            use_attenuation: manifest.use_attenuation,
        };
        Ok(TransferModel {
            base: SinusoidalNetwork::from_checkpoint(&base)?,
            nets,
            grid: FeatureGrid {
                layout: manifest.layout,
                features,
            },
        })
    }
}
