use std::fs;
use std::path::{Path, PathBuf};

use idf_core::model::{eval_sdf_grid, BaseField, IdfModel, SdfField};
use idf_core::theory::{self, BoundReport};
use idf_core::train::{fit, sphere_pretrain, FitMode};
use idf_core::transfer::{transfer_pipeline, TransferInputs, TransferModel};
use idf_core::{IdfError, Precision, Real, Result};
use idf_geometry::io::mesh_from_ply;
use idf_geometry::ply::read_ply;
use idf_geometry::{
    chamfer_metrics_with, load_cloud, load_mesh, marching_cubes, normalize_mesh, sample_surface, save_cloud, save_mesh, CosineMode,
    NormalSource, NormalizeTransform, OrientedPointCloud,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::{AnalyticChoice, Command, NormalChoice, PrecisionChoice};

/// Samples used for the post-fit displacement bound check.
const BOUND_SAMPLES: usize = 100_000;

pub fn run(command: Command, threads: usize) -> Result<()> {
    match command {
        Command::Prepare {
            mesh,
            out,
            count,
            seed,
            normals,
            transform_out,
        } => {
            init_threads(threads);
            prepare(&mesh, &out, count, seed, normals, transform_out.as_deref())
        }
        Command::Fit {
            config,
            base_only,
            no_tanh_bound,
            no_attenuation,
            no_progressive,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.model.use_tanh_bound &= !no_tanh_bound;
            cfg.model.use_attenuation &= !no_attenuation;
            cfg.model.use_progressive &= !no_progressive;
            init_threads(if cfg.deterministic { 1 } else { threads });
            let mode = if base_only { FitMode::BaseOnly } else { FitMode::Composed };
            match cfg.train.precision {
                Precision::F32 => fit_run::<f32>(&cfg, mode),
                Precision::F64 => fit_run::<f64>(&cfg, mode),
            }
        }
        Command::Mesh {
            model,
            out,
            resolution,
            max_resolution,
            base_only,
            precision,
            denormalize,
        } => {
            init_threads(threads);
            let opts = MeshOptions {
                resolution,
                cap: max_resolution,
                base_only,
                denormalize,
            };
            match precision {
                PrecisionChoice::F32 => mesh::<f32>(&model, &out, &opts),
                PrecisionChoice::F64 => mesh::<f64>(&model, &out, &opts),
            }
        }
        Command::Eval {
            a,
            b,
            samples,
            seed,
            signed_normals,
        } => {
            init_threads(threads);
            let ca = load_points(&a, samples, seed)?;
            let cb = load_points(&b, samples, seed)?;
            let mode = if signed_normals { CosineMode::Signed } else { CosineMode::Absolute };
            let report = chamfer_metrics_with(&ca, &cb, mode)?;
            println!("{}", to_json(&report)?);
            Ok(())
        }
        Command::Transfer { config } => {
            let cfg = RunConfig::load(&config)?;
            init_threads(if cfg.deterministic { 1 } else { threads });
            match cfg.transfer.transfer_train.precision {
                Precision::F32 => transfer_run::<f32>(&cfg),
                Precision::F64 => transfer_run::<f64>(&cfg),
            }
        }
        Command::Verify {
            model,
            analytic,
            out,
            samples,
            seed,
            alpha,
            cloud,
            jitter,
        } => {
            init_threads(threads);
            let report = verify(model.as_deref(), analytic, samples, seed, alpha, cloud.as_deref(), jitter)?;
            write_text(&out, &report.to_json()?)?;
            eprintln!(
                "ε̂ {:.3e}  M̂ {:.3e}  violations: {} / {} / {} of {}",
                report.epsilon_hat,
                report.m_hat,
                report.lipschitz.violations,
                report.eikonal.violations,
                report.normalized.violations,
                report.sample_count
            );
            Ok(())
        }
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

fn init_threads(n: usize) {
    // only the first call can configure the global pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| IdfError::Numeric(format!("serialization: {e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IdfError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| IdfError::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| IdfError::Config(format!("paths.{key} is required")))
}

fn prepare(mesh: &Path, out: &Path, count: usize, seed: u64, normals: NormalChoice, transform_out: Option<&Path>) -> Result<()> {
    if count == 0 {
        return Err(IdfError::Validation("sample count must be positive".into()));
    }
    let m = load_mesh(mesh, None)?;
    let (normalized, transform) = normalize_mesh(&m)?;
    let source = match normals {
        NormalChoice::Face => NormalSource::Face,
        NormalChoice::Vertex => NormalSource::Vertex,
    };
    let cloud = sample_surface(&normalized, count, seed, source)?;
    save_cloud(out, &cloud)?;
    let text = to_json(&transform)?;
    if let Some(p) = transform_out {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

/// Writes the diagnostic of a non-finite abort next to the run outputs.
fn record_failure<T>(out: &Path, r: Result<T>) -> Result<T> {
    if let Err(IdfError::NonFinite(d)) = &r {
        let path = out.join("nan_diagnostic.json");
        write_text(&path, &to_json(d)?)?;
        eprintln!("diagnostic written to {}", path.display());
    }
    r
}

fn manifest(cfg: &RunConfig, command: &str, extra: serde_json::Value) -> serde_json::Value {
    json!({
        "tool": "idf",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "threads": rayon::current_num_threads(),
        "config": cfg,
        "results": extra,
    })
}

fn fit_run<F: Real>(cfg: &RunConfig, mode: FitMode) -> Result<()> {
    let cloud = load_cloud(required(&cfg.paths.cloud, "cloud")?)?;
    let out = &cfg.paths.output;
    let mut model = IdfModel::<F>::new(&cfg.model, cfg.init_seed())?;
    let pretrain = if cfg.pretrain_base {
        let r = sphere_pretrain(&mut model.base, &cfg.pretrain)?;
        if !r.converged {
            eprintln!("warning: sphere pretraining left a mean residual of {:.3e}", r.mean_abs_residual);
        }
        Some(r)
    } else {
        None
    };
    let history = record_failure(out, fit(&mut model, &cloud, &cfg.train, mode))?;
    model.save_bundle(&out.join("model"))?;
    history.write_csv(&out.join("history.csv"))?;
    let probe = theory::cube_samples(BOUND_SAMPLES, -1.0, 1.0, cfg.train.seed);
    let x = ndarray::Array2::from_shape_fn((probe.len(), 3), |(i, k)| F::of(probe[i][k]));
    let max_offset = model.offset(x.view())?.iter().fold(0.0f64, |m, v| m.max(v.f64().abs()));
    let mode_name = match mode {
        FitMode::Composed => "composed",
        FitMode::BaseOnly => "base-only",
    };
    let extra = json!({
        "mode": mode_name,
        "pretrain": pretrain,
        "final_epoch": history.records.last(),
        "max_abs_offset": max_offset,
    });
    write_text(&out.join("run_manifest.json"), &to_json(&manifest(cfg, "fit", extra))?)
}

fn transfer_run<F: Real>(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.paths;
    let source = load_cloud(required(&p.source, "source")?)?;
    let target = load_cloud(required(&p.target, "target")?)?;
    let source_base = p.source_base.as_deref().map(load_cloud).transpose()?;
    let target_base = p.target_base.as_deref().map(load_cloud).transpose()?;
    let inputs = TransferInputs {
        source: &source,
        target: &target,
        source_base: source_base.as_ref(),
        target_base: target_base.as_ref(),
    };
    let out = &p.output;
    let (model, pipeline) = record_failure(out, transfer_pipeline::<F>(&inputs, &cfg.transfer))?;
    model.save_bundle(&out.join("model"))?;
    for (name, h) in &pipeline.histories {
        h.write_csv(&out.join(format!("{name}.csv")))?;
    }
    let finals: serde_json::Map<String, serde_json::Value> = pipeline
        .histories
        .iter()
        .map(|(name, h)| (name.clone(), json!(h.records.last())))
        .collect();
    write_text(&out.join("run_manifest.json"), &to_json(&manifest(cfg, "transfer", json!({ "final_epochs": finals })))?)
}

struct MeshOptions {
    resolution: usize,
    cap: usize,
    base_only: bool,
    denormalize: Option<PathBuf>,
}

fn is_transfer_bundle(dir: &Path) -> bool {
    dir.join("features.json").is_file()
}

fn mesh<F: Real>(dir: &Path, out: &Path, opts: &MeshOptions) -> Result<()> {
    let grid = if is_transfer_bundle(dir) {
        let m = TransferModel::<F>::load_bundle(dir)?;
        extract::<F>(&m, &BaseField(&m.base), opts)?
    } else {
        let m = IdfModel::<F>::load_bundle(dir)?;
        extract::<F>(&m, &BaseField(&m.base), opts)?
    };
    let mut mesh = marching_cubes(&grid, 0.0);
    if mesh.is_empty() {
        return Err(IdfError::Numeric("the field has no zero crossing inside the cube".into()));
    }
    if let Some(p) = &opts.denormalize {
        let text = fs::read_to_string(p).map_err(|e| IdfError::io(p, e))?;
        let t: NormalizeTransform = serde_json::from_str(&text).map_err(|e| IdfError::format(p, e))?;
        mesh = t.inverse_mesh(&mesh);
    }
    save_mesh(out, &mesh)?;
    eprintln!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}

fn extract<F: Real>(full: &dyn SdfField<F>, base: &dyn SdfField<F>, opts: &MeshOptions) -> Result<idf_geometry::ScalarGrid> {
    let field = if opts.base_only { base } else { full };
    eval_sdf_grid(field, opts.resolution, opts.cap)
}

/// A cloud as is, or samples of a mesh.
fn load_points(path: &Path, samples: usize, seed: u64) -> Result<OrientedPointCloud> {
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        let bytes = fs::read(path).map_err(|e| IdfError::io(path, e))?;
        let src = path.display().to_string();
        let doc = read_ply(&bytes, &src)?;
        let has_faces = doc.element("face").is_some_and(|f| f.count > 0);
        if !has_faces {
            return Ok(OrientedPointCloud::from_ply(&doc, &src)?);
        }
        return Ok(sample_surface(&mesh_from_ply(&doc, &src)?, samples, seed, NormalSource::Face)?);
    }
    Ok(sample_surface(&load_mesh(path, None)?, samples, seed, NormalSource::Face)?)
}

fn verify(
    model: Option<&Path>,
    analytic: Option<AnalyticChoice>,
    samples: usize,
    seed: u64,
    alpha: Option<f64>,
    cloud: Option<&Path>,
    jitter: f64,
) -> Result<BoundReport> {
    if samples == 0 {
        return Err(IdfError::Validation("sample count must be positive".into()));
    }
    let points = |default: Vec<nalgebra::Vector3<f64>>| -> Result<Vec<nalgebra::Vector3<f64>>> {
        match cloud {
            Some(c) => theory::jittered_samples(&load_cloud(c)?.points, samples, jitter, seed),
            None => Ok(default),
        }
    };
    let probe_seed = seed.wrapping_add(1);
    match (model, analytic) {
        (_, Some(AnalyticChoice::Plane)) => {
            let x = points(theory::cube_samples(samples, -1.0, 1.0, seed))?;
            let d = theory::uniform_displacements(x.len(), alpha.unwrap_or(0.05), seed.wrapping_add(2));
            theory::verify_bounds(&idf_core::analytic::LinearField::plane_z(), &x, &d, probe_seed)
        }
        (_, Some(AnalyticChoice::Sphere)) => {
            let x = points(theory::shell_samples(samples, 0.25, 0.75, seed))?;
            let d = theory::uniform_displacements(x.len(), alpha.unwrap_or(0.05), seed.wrapping_add(2));
            theory::verify_bounds(&idf_core::analytic::Sphere::centered(0.5), &x, &d, probe_seed)
        }
        (Some(dir), None) => {
            let (base, model_alpha) = if is_transfer_bundle(dir) {
                let m = TransferModel::<f64>::load_bundle(dir)?;
                (m.base, m.nets.alpha)
            } else {
                let m = IdfModel::<f64>::load_bundle(dir)?;
                (m.base, m.alpha)
            };
            let x = points(theory::cube_samples(samples, -1.0, 1.0, seed))?;
            let d = theory::uniform_displacements(x.len(), alpha.unwrap_or(model_alpha), seed.wrapping_add(2));
            theory::verify_bounds(&base, &x, &d, probe_seed)
        }
        (None, None) => Err(IdfError::Config("verify needs --model or --analytic".into())),
    }
}
