//! Headline checks, one PASS/FAIL line each. Run with `--nocapture` to see
//! the report; the heavy criteria train small networks on the CPU.

use idf_core::analytic::{AnalyticField, BumpySphere, LinearField, Sphere};
use idf_core::loss::{siren_loss, LossTerms, LossWeights};
use idf_core::model::{attenuation, eval_sdf_grid, FieldVars, IdfModel, ModelConfig, SdfField};
use idf_core::siren::{collect_grads, register, Head, Module, SinusoidalNetwork};
use idf_core::tape::Tape;
use idf_core::theory;
use idf_core::train::{fit, progressive_blend, sphere_pretrain, FitMode, PretrainConfig, TrainConfig};
use idf_core::transfer::*;
use idf_geometry::*;
use nalgebra::Vector3;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- oracles

fn attenuation_exact() -> Outcome {
    let nu = 0.02f64;
    let got = [attenuation(0.0, nu), attenuation(nu, nu), attenuation(2.0 * nu, nu)];
    let want = [1.0, 0.5, 1.0 / 17.0];
    let err = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    outcome(err <= 1e-12, format!("max error {err:.1e}"))
}

fn schedule_exact() -> Outcome {
    let tm = 0.2;
    let ends = progressive_blend(tm, tm) == 1.0 && progressive_blend(1.0, tm) == 0.0;
    let mid = progressive_blend((1.0 + tm) / 2.0, tm);
    let sweep: Vec<f64> = (0..1000).map(|i| progressive_blend(i as f64 / 999.0, tm)).collect();
    let monotone = sweep.windows(2).all(|w| w[1] <= w[0]);
    outcome(ends && (mid - 0.5).abs() < 1e-15 && monotone, format!("midpoint {mid}, monotone {monotone}"))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

fn composed_loss(model: &IdfModel<f64>, x: &Array2<f64>, normals: &Array2<f64>, w: &LossWeights) -> (f64, Vec<Array2<f64>>) {
    let mut t = Tape::new();
    let bv = register(&mut t, &model.base, true);
    let dv = register(&mut t, &model.displacement, true);
    let (_, composed) = model.tape_fields(&mut t, &bv, &dv, x.clone(), true);
    let l = siren_loss(&mut t, composed.unwrap(), normals, w).unwrap();
    let value = t.scalar(l.total);
    let mut g = t.backward(l.total).unwrap();
    let mut grads = collect_grads(&mut g, &bv, &model.base);
    grads.extend(collect_grads(&mut g, &dv, &model.displacement));
    (value, grads)
}

fn gradient_suites() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-5;
    let mut input_err: f64 = 0.0;
    for i in 0..100 {
        let net = SinusoidalNetwork::<f64>::init(3, rng.random_range(8..33), 3, 1, [5.0, 15.0][i % 2], Head::Linear, 100 + i as u64).unwrap();
        let x = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let g = net.input_gradient(x.view()).unwrap();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for k in 0..3 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[[0, k]] += h;
            m[[0, k]] -= h;
            let fd = (net.forward(p.view()).unwrap()[[0, 0]] - net.forward(m.view()).unwrap()[[0, 0]]) / (2.0 * h);
            diff += (g[[0, k]] - fd).powi(2);
            norm += fd * fd;
        }
        input_err = input_err.max(diff.sqrt() / norm.sqrt().max(1e-8));
    }

    let cfg = ModelConfig {
        base_hidden: 10,
        base_depth: 2,
        displacement_hidden: 10,
        displacement_depth: 2,
        ..ModelConfig::default()
    };
    let model = IdfModel::<f64>::new(&cfg, 6).unwrap();
    let x = Array2::from_shape_fn((10, 3), |_| rng.random_range(-0.6..0.6));
    let mut normals = Array2::zeros((5, 3));
    for i in 0..5 {
        let n = random_unit(&mut rng);
        for k in 0..3 {
            normals[[i, k]] = n[k];
        }
    }
    let eps = 1e-6;
    let mut param_err: f64 = 0.0;
    for term in 0..4 {
        let mut w = LossWeights { eikonal: 0.0, surface: 0.0, normal: 0.0, offsurface: 0.0, ..LossWeights::default() };
        match term {
            0 => w.eikonal = 5.0,
            1 => w.surface = 400.0,
            2 => w.normal = 40.0,
            _ => w.offsurface = 50.0,
        }
        let (_, grads) = composed_loss(&model, &x, &normals, &w);
        let nb = model.base.params().len();
        for (gi, g) in grads.iter().enumerate() {
            let j = rng.random_range(0..g.len());
            let shifted = |d: f64| {
                let mut m = model.clone();
                let target = if gi < nb { m.base.params_mut().swap_remove(gi) } else { m.displacement.params_mut().swap_remove(gi - nb) };
                *target.iter_mut().nth(j).unwrap() += d;
                composed_loss(&m, &x, &normals, &w).0
            };
            let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            let a = *g.iter().nth(j).unwrap();
            param_err = param_err.max((a - fd).abs() / fd.abs().max(1e-4));
        }
    }
    outcome(input_err < 1e-6 && param_err < 1e-4, format!("input {input_err:.1e}, loss terms {param_err:.1e}"))
}

fn analytic_terms<A: AnalyticField>(f: &A, surface: &[(Vector3<f64>, Vector3<f64>)], off: &[Vector3<f64>]) -> LossTerms {
    let pts: Vec<Vector3<f64>> = surface.iter().map(|(p, _)| *p).chain(off.iter().copied()).collect();
    let mut t = Tape::new();
    let field = FieldVars {
        value: t.constant(Array2::from_shape_fn((pts.len(), 1), |(i, _)| f.value(&pts[i]))),
        grad: t.constant(Array2::from_shape_fn((pts.len(), 3), |(i, k)| f.gradient(&pts[i])[k])),
    };
    let normals = Array2::from_shape_fn((surface.len(), 3), |(i, k)| surface[i].1[k]);
    siren_loss(&mut t, field, &normals, &LossWeights::default()).unwrap().values(&t)
}

fn loss_exact() -> Outcome {
    let rel = |a: f64, b: f64| if a == b { 0.0 } else { (a - b).abs() / b.abs() };
    let mut worst: f64 = 0.0;
    let plane = analytic_terms(
        &LinearField::plane_z(),
        &[(Vector3::new(0.1, 0.2, 0.0), Vector3::z())],
        &[Vector3::new(0.4, 0.0, 0.2)],
    );
    for (a, b) in [(plane.eikonal, 0.0), (plane.surface, 0.0), (plane.normal, 0.0), (plane.offsurface, 50.0 * (-20.0f64).exp())] {
        worst = worst.max(rel(a, b));
    }
    let tilt = Vector3::new(0.5, 0.0, 3f64.sqrt() / 2.0);
    let sphere = analytic_terms(
        &Sphere::centered(0.5),
        &[(Vector3::new(0.5, 0.0, 0.0), Vector3::x()), (Vector3::new(0.5, 0.0, 0.0), tilt)],
        &[Vector3::new(0.0, 0.3, 0.0), Vector3::new(0.0, 0.0, -0.55)],
    );
    for (a, b) in [
        (sphere.eikonal, 0.0),
        (sphere.surface, 0.0),
        (sphere.normal, 40.0 * 0.5 / 2.0),
        (sphere.offsurface, 50.0 * ((-20.0f64).exp() + (-5.0f64).exp()) / 2.0),
    ] {
        worst = worst.max(rel(a, b));
    }
    outcome(worst <= 1e-6, format!("max relative error {worst:.1e}"))
}

fn theory_analytic() -> (bool, String) {
    let alpha = 0.05;
    let plane = theory::verify_bounds(&LinearField::plane_z(), &theory::cube_samples(20_000, -1.0, 1.0, 1), &theory::uniform_displacements(20_000, alpha, 2), 3).unwrap();
    let sphere = theory::verify_bounds(&Sphere::centered(0.5), &theory::shell_samples(20_000, 0.25, 0.75, 4), &theory::uniform_displacements(20_000, alpha, 5), 6).unwrap();
    let count = |r: &theory::BoundReport| r.lipschitz.violations + r.eikonal.violations + r.normalized.violations;
    (count(&plane) + count(&sphere) == 0, format!("plane {} and sphere {} violations", count(&plane), count(&sphere)))
}

fn marching_cubes_checks() -> Outcome {
    let grid = ScalarGrid::from_fn(64, -1.0, 1.0, |p| p.norm() - 0.5).unwrap();
    let mesh = marching_cubes(&grid, 0.0);
    let diag = grid.cell_diagonal();
    let worst = mesh.vertices.iter().map(|v| (v.norm() - 0.5).abs()).fold(0.0, f64::max);

    // one negative corner: a single triangle through three edge midpoints
    let mut values = vec![1.0; 8];
    values[0] = -1.0;
    let single = marching_cubes(&ScalarGrid::new([2, 2, 2], [0.0; 3], 1.0, values).unwrap(), 0.0);
    let mut corners: Vec<[f64; 3]> = single.vertices.iter().map(|v| [v.x, v.y, v.z]).collect();
    corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let case_one = single.triangles.len() == 1 && corners == vec![[0.0, 0.0, 0.5], [0.0, 0.5, 0.0], [0.5, 0.0, 0.0]];
    outcome(!mesh.is_empty() && worst < diag && case_one, format!("worst radial error {worst:.2e} < diagonal {diag:.2e}, single triangle {case_one}"))
}

fn brute_force(a: &OrientedPointCloud, b: &OrientedPointCloud) -> (f64, f64) {
    let one_way = |from: &OrientedPointCloud, to: &OrientedPointCloud| {
        let (mut d_sum, mut c_sum) = (0.0, 0.0);
        for (p, n) in from.points.iter().zip(&from.normals) {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for (j, q) in to.points.iter().enumerate() {
                let d = (q - p).norm();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            let m = to.normals[best];
            d_sum += best_d;
            c_sum += 0.5 * (n - m).norm_squared().min((n + m).norm_squared());
        }
        (d_sum / from.len() as f64, c_sum / from.len() as f64)
    };
    let (da, ca) = one_way(a, b);
    let (db, cb) = one_way(b, a);
    (0.5 * (da + db), 0.5 * (ca + cb))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cloud = |n: usize| {
        let points = (0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let normals = (0..n).map(|_| random_unit(&mut rng)).collect();
        OrientedPointCloud::new(points, normals).unwrap()
    };
    let mut exact = true;
    for _ in 0..10 {
        let (a, b) = (cloud(50), cloud(50));
        let r = chamfer_metrics(&a, &b).unwrap();
        exact &= (r.point_to_point, r.normal_cosine) == brute_force(&a, &b);
    }
    let a = cloud(500);
    let same = chamfer_metrics(&a, &a).unwrap();
    let zero = same.point_to_point == 0.0 && same.normal_cosine == 0.0;
    outcome(exact && zero, format!("brute force exact {exact}, identical sets zero {zero}"))
}

fn determinism() -> Outcome {
    let cloud = BumpySphere::default().sample(2000, 1).unwrap();
    let cfg = ModelConfig { base_hidden: 16, base_depth: 2, displacement_hidden: 16, displacement_depth: 2, ..ModelConfig::default() };
    let train = TrainConfig { epochs: 2, steps_per_epoch: 10, batch_surface: 128, batch_offsurface: 128, seed: 8, ..TrainConfig::default() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || {
        pool.install(|| {
            let mut model = IdfModel::<f32>::new(&cfg, 4).unwrap();
            fit(&mut model, &cloud, &train, FitMode::Composed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            model.save_bundle(dir.path()).unwrap();
            ["base.json", "displacement.json", "manifest.json"].map(|f| std::fs::read(dir.path().join(f)).unwrap())
        })
    };
    let same = run() == run();
    outcome(same, format!("checkpoints identical {same}"))
}

// ------------------------------------------------------ trained criteria

/// Two-way point metric of a field's zero set against the dense reference.
fn surface_metric<S: SdfField<f32>>(field: &S, reference: &OrientedPointCloud) -> f64 {
    let grid = eval_sdf_grid(field, 128, 512).unwrap();
    let mesh = marching_cubes(&grid, 0.0);
    let samples = sample_surface(&mesh, 1_000_000, 3, NormalSource::Face).unwrap();
    chamfer_metrics(&samples, reference).unwrap().point_to_point
}

fn desk_train(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, batch_surface: 512, batch_offsurface: 512, lr_init: lr, lr_final: lr / 10.0, ..TrainConfig::default() }
}

struct Bumpy {
    cloud: OrientedPointCloud,
    reference: OrientedPointCloud,
}

fn bumpy() -> Bumpy {
    let shape = BumpySphere::default();
    Bumpy { cloud: shape.sample(100_000, 1).unwrap(), reference: shape.sample(1_000_000, 2).unwrap() }
}

fn desk_model(free: bool, omega_base: f64) -> IdfModel<f32> {
    let mut cfg = ModelConfig { base_hidden: 64, base_depth: 3, omega_base, displacement_hidden: 64, displacement_depth: 3, ..ModelConfig::default() };
    if free {
        cfg.use_tanh_bound = false;
        cfg.use_attenuation = false;
        cfg.use_progressive = false;
    }
    let mut m = IdfModel::<f32>::new(&cfg, 0).unwrap();
    sphere_pretrain(&mut m.base, &PretrainConfig::default()).unwrap();
    m
}

fn max_offset(model: &IdfModel<f32>) -> f64 {
    let x = theory::cube_samples(100_000, -1.0, 1.0, 12);
    let x = Array2::from_shape_fn((x.len(), 3), |(i, k)| x[i][k] as f32);
    model.offset(x.view()).unwrap().iter().fold(0.0f64, |m, d| m.max(d.abs() as f64))
}

struct DecompositionRuns {
    base_only: f64,
    full: f64,
    free: f64,
    full_offset: f64,
    alpha: f64,
    base_net: SinusoidalNetwork<f32>,
}

fn decomposition(data: &Bumpy) -> DecompositionRuns {
    let train = desk_train(10, 5e-4);
    let mut base = desk_model(false, 15.0);
    fit(&mut base, &data.cloud, &train, FitMode::BaseOnly).unwrap();
    let base_only = surface_metric(&base.base_field(), &data.reference);
    let mut full = desk_model(false, 15.0);
    fit(&mut full, &data.cloud, &train, FitMode::Composed).unwrap();
    let mut free = desk_model(true, 15.0);
    fit(&mut free, &data.cloud, &train, FitMode::Composed).unwrap();
    DecompositionRuns {
        base_only,
        full: surface_metric(&full, &data.reference),
        free: surface_metric(&free, &data.reference),
        full_offset: max_offset(&full),
        alpha: full.alpha,
        base_net: base.base,
    }
}

fn theory_trained(base: &SinusoidalNetwork<f32>, data: &Bumpy) -> (bool, String) {
    let n = 100_000;
    let samples = theory::jittered_samples(&data.cloud.points, n, 0.02, 13).unwrap();
    match theory::verify_bounds(base, &samples, &theory::uniform_displacements(n, 0.05, 14), 15) {
        Ok(r) => (
            r.lipschitz.violation_fraction < 0.01 && r.eikonal.violation_fraction < 0.01 && r.normalized.violation_fraction < 0.01,
            format!(
                "trained base fractions {:.4}/{:.4}/{:.4} (eps {:.3})",
                r.lipschitz.violation_fraction, r.eikonal.violation_fraction, r.normalized.violation_fraction, r.epsilon_hat
            ),
        ),
        Err(e) => (false, format!("trained base: {e}")),
    }
}

fn transfer_checks(data: &Bumpy) -> Outcome {
    // FiLM with a zero code is the plain displacement network
    let nets = TransferNets::<f64>::new(&TransferNetConfig { grid_resolution: 6, grid_channels: 4, displacement_hidden: 6, displacement_depth: 2, ..TransferNetConfig::default() }, 3).unwrap();
    let fbar = array![[0.3], [-0.7], [0.9]];
    let zero: Codes<f64> = (0..2).map(|_| (Array2::zeros((3, 6)), Array2::zeros((3, 6)))).collect();
    let film = nets.film_displacement(fbar.view(), &zero).unwrap() == nets.displacement.forward(fbar.view()).unwrap().column(0).to_owned();

    // a silent head leaves the target base untouched
    let mut silent = nets.clone();
    silent.displacement.zero_output_layer();
    let mut target = SinusoidalNetwork::<f64>::init(3, 16, 2, 1, 5.0, Head::Linear, 2).unwrap();
    sphere_pretrain(&mut target, &PretrainConfig { steps: 100, batch: 256, validation_samples: 10, ..Default::default() }).unwrap();
    let model = TransferModel { base: target.clone(), grid: silent.build_grid(&data.cloud.select(&(0..500).collect::<Vec<_>>())).unwrap(), nets: silent };
    let x = theory::shell_samples(1000, 0.4, 0.6, 9);
    let x = Array2::from_shape_fn((x.len(), 3), |(i, k)| x[i][k]);
    let identity = model.compose_sdf(x.view()).unwrap() == target.forward(x.view()).unwrap().column(0).to_owned();

    // self-transfer against a direct fit with the same total epochs
    // the smooth base takes most of the budget; detail converges quickly
    let (base_epochs, transfer_epochs) = (8, 2);
    let cfg = TransferConfig {
        base: BaseNetConfig { hidden: 64, depth: 3, omega: 5.0 },
        nets: TransferNetConfig {
            grid_mode: GridMode::Plane { axis: 2 },
            grid_resolution: 128,
            grid_channels: 16,
            omega_displacement: 15.0,
            ..TransferNetConfig::default()
        },
        grid_points: 20_000,
        base_train: desk_train(base_epochs, 5e-4),
        transfer_train: desk_train(transfer_epochs, 1e-3),
        ..TransferConfig::default()
    };
    let inputs = TransferInputs { source: &data.cloud, source_base: None, target: &data.cloud, target_base: None };
    let (transferred, _) = transfer_pipeline::<f32>(&inputs, &cfg).unwrap();
    let via_transfer = surface_metric(&transferred, &data.reference);
    let mut direct = desk_model(false, 5.0);
    fit(&mut direct, &data.cloud, &desk_train(base_epochs + transfer_epochs, 5e-4), FitMode::Composed).unwrap();
    let direct = surface_metric(&direct, &data.reference);
    let ratio = via_transfer / direct;
    outcome(
        film && identity && ratio < 1.2,
        format!("zero-code FiLM {film}, silent transfer {identity}, self-transfer {via_transfer:.3e} / direct {direct:.3e} = {ratio:.3}"),
    )
}

// ------------------------------------------------------------------ report

#[test]
fn headline_criteria() {
    let mut lines: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((name, o));
    };
    report("attenuation", attenuation_exact());
    report("schedule", schedule_exact());
    report("gradients", gradient_suites());
    report("loss", loss_exact());
    report("marching_cubes", marching_cubes_checks());
    report("metrics", metrics_oracle());
    report("determinism", determinism());

    let data = bumpy();
    let t0 = Instant::now();
    let runs = decomposition(&data);
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    report(
        "displacement_bound",
        outcome(runs.full_offset <= runs.alpha, format!("max |offset| {:.4} over 1e5 samples, alpha {}", runs.full_offset, runs.alpha)),
    );
    let gain = 1.0 - runs.full / runs.base_only;
    let slack = runs.full / runs.free - 1.0;
    report(
        "decomposition",
        outcome(
            gain >= 0.2 && slack <= 0.1,
            format!("base-only {:.3e}, full {:.3e}, free {:.3e}: gain {:.0}%, vs free {:+.0}% ({minutes:.1} min)", runs.base_only, runs.full, runs.free, 100.0 * gain, 100.0 * slack),
        ),
    );
    let t0 = Instant::now();
    let (analytic_ok, analytic) = theory_analytic();
    let (trained_ok, trained) = theory_trained(&runs.base_net, &data);
    let secs = t0.elapsed().as_secs_f64();
    report("theory_bounds", outcome(analytic_ok && trained_ok && secs < 120.0, format!("{analytic}; {trained} ({secs:.0} s)")));
    report("transfer", transfer_checks(&data));

    let failing: Vec<&str> = lines.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failing.is_empty(), "failing criteria: {failing:?}");
}
