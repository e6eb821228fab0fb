use idf_core::analytic::{sphere_cloud, BumpySphere};
use idf_core::siren::{Head, Module, SinusoidalNetwork};
use idf_core::tape::Tape;
use idf_core::transfer::model::{transfer_fields, GridInputs, TransferVars};
use idf_core::transfer::*;
use idf_core::IdfError;
use idf_geometry::OrientedPointCloud;
use nalgebra::Vector3;
use ndarray::{array, s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_nets(mode: GridMode) -> TransferNets<f64> {
    let cfg = TransferNetConfig {
        grid_mode: mode,
        grid_resolution: 6,
        grid_channels: 4,
        conv_layers: 2,
        encoder_hidden: 8,
        mapping_hidden: 8,
        displacement_hidden: 6,
        displacement_depth: 2,
        ..TransferNetConfig::default()
    };
    let mut nets = TransferNets::new(&cfg, 5).unwrap();
    // a live head so that derivatives reach every component
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for w in nets.displacement.layers.last_mut().unwrap().weight.iter_mut() {
        *w = rng.random_range(-0.05..0.05);
    }
    nets
}

fn sphere_base() -> SinusoidalNetwork<f64> {
    let mut b = SinusoidalNetwork::init(3, 16, 2, 1, 5.0, Head::Linear, 2).unwrap();
    idf_core::train::sphere_pretrain(
        &mut b,
        &idf_core::train::PretrainConfig {
            steps: 150,
            batch: 256,
            validation_samples: 10,
            ..Default::default()
        },
    )
    .unwrap();
    b
}

fn near_surface_points(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 3), |_| 0.0).rows_mut().into_iter().for_each(|_| {});
    let mut x = Array2::zeros((n, 3));
    for i in 0..n {
        let d = idf_core::analytic::random_direction(&mut rng) * rng.random_range(0.48..0.53);
        for k in 0..3 {
            x[[i, k]] = d[k];
        }
    }
    x
}

#[test]
fn encoder_sees_only_normals() {
    let nets = small_nets(GridMode::Volume);
    let n = array![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0]];
    let f = nets.encode_points(n.view()).unwrap();
    assert_eq!(f.row(0), f.row(1));
    let swapped = array![[0.6, 0.8, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
    let g = nets.encode_points(swapped.view()).unwrap();
    assert_eq!(g.row(0), f.row(2));
    assert!(matches!(nets.encode_points(array![[0.0, 0.0, 3.0]].view()), Err(IdfError::Validation(_))));
}

#[test]
fn encoder_features_ignore_scale_and_translation() {
    let nets = small_nets(GridMode::Volume);
    let cloud = sphere_cloud(0.4, 50, 3).unwrap();
    let normals = Array2::from_shape_fn((50, 3), |(i, k)| cloud.normals[i][k]);
    let moved = OrientedPointCloud {
        points: cloud.points.iter().map(|p| p * 1.7 + Vector3::new(0.1, -0.2, 0.05)).collect(),
        normals: cloud.normals.clone(),
    };
    let moved_normals = Array2::from_shape_fn((50, 3), |(i, k)| moved.normals[i][k]);
    assert_eq!(nets.encode_points(normals.view()).unwrap(), nets.encode_points(moved_normals.view()).unwrap());
}

#[test]
fn scatter_single_and_coincident_points() {
    let layout = GridLayout::new(GridMode::Volume, 4).unwrap();
    // cell (1, 2, 3) center
    let c = layout.node_center(1 + 4 * 2 + 16 * 3);
    let feats = array![[2.0, -1.0], [4.0, 3.0]];
    let m = layout.scatter_matrix::<f64>(&[c]);
    let one = m.apply(feats.slice(s![0..1, ..]));
    for node in 0..64 {
        let expect = if node == 1 + 8 + 48 { [2.0, -1.0] } else { [0.0, 0.0] };
        assert_eq!(one.row(node).to_vec(), expect.to_vec());
    }
    let two = layout.scatter_matrix::<f64>(&[c, c]).apply(feats.view());
    assert_eq!(two.row(57).to_vec(), vec![3.0, 1.0]);
}

#[test]
fn grid_is_invariant_to_point_order() {
    let nets = small_nets(GridMode::Volume);
    let cloud = BumpySphere::default().sample(300, 4).unwrap();
    let mut order: Vec<usize> = (0..300).collect();
    order.reverse();
    order.swap(3, 100);
    let a = nets.build_grid(&cloud).unwrap();
    let b = nets.build_grid(&cloud.select(&order)).unwrap();
    assert!((&a.features - &b.features).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn identity_propagation_keeps_scatter() {
    let mut nets = small_nets(GridMode::Volume);
    nets.conv.layers.clear();
    let p = nets.layout.node_center(40);
    let cloud = OrientedPointCloud::new(vec![Vector3::new(p[0], p[1], p[2])], vec![Vector3::z()]).unwrap();
    let g = nets.build_grid(&cloud).unwrap();
    let f = nets.encode_points(array![[0.0, 0.0, 1.0]].view()).unwrap();
    for node in 0..nets.layout.node_count() {
        if node == 40 {
            assert_eq!(g.features.row(node), f.row(0));
        } else {
            assert!(g.features.row(node).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn query_midpoint_is_mean_and_gradient_matches_differences() {
    let nets = small_nets(GridMode::Volume);
    let grid = nets.build_grid(&BumpySphere::default().sample(400, 1).unwrap()).unwrap();
    let (a, b) = (grid.layout.node_center(10), grid.layout.node_center(11));
    let mid = array![[(a[0] + b[0]) / 2.0, a[1], a[2]]];
    let (phi, _) = grid.query(mid.view()).unwrap();
    let expect = (&grid.features.row(10) + &grid.features.row(11)) / 2.0;
    assert!((phi.row(0).to_owned() - expect).iter().all(|v| v.abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-6;
    for _ in 0..20 {
        // keep clear of cell faces so the stencil stays in one cell
        let x: Vec<f64> = (0..3).map(|_| {
            let cell = rng.random_range(0..5) as f64;
            -1.0 + (cell + 0.5 + rng.random_range(0.1..0.9)) / 3.0
        }).collect();
        let p = array![[x[0], x[1], x[2]]];
        let (_, d) = grid.query_with_gradient(p.view()).unwrap();
        for k in 0..3 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[[0, k]] += h;
            pm[[0, k]] -= h;
            let fd = (grid.query(pp.view()).unwrap().0 - grid.query(pm.view()).unwrap().0) / (2.0 * h);
            for c in 0..fd.ncols() {
                let scale = fd[[0, c]].abs().max(1e-3);
                assert!((fd[[0, c]] - d[k][[0, c]]).abs() / scale < 1e-5);
            }
        }
    }
}

#[test]
fn mapping_shapes_and_zero_weights() {
    let mut nets = small_nets(GridMode::Volume);
    let phi = array![[0.1, 0.2, -0.3, 0.4], [0.0, 1.0, 0.5, -0.5]];
    let codes = nets.mapping_codes(phi.view()).unwrap();
    assert_eq!(codes.len(), 2);
    assert!(codes.iter().all(|(g, b)| g.dim() == (2, 6) && b.dim() == (2, 6)));
    assert_ne!(codes[0].0.row(0), codes[0].0.row(1));
    for l in &mut nets.mapping.layers {
        l.weight.fill(0.0);
    }
    let bias = nets.mapping.layers.last().unwrap().bias.clone();
    let codes = nets.mapping_codes(phi.view()).unwrap();
    assert_eq!(codes[1].1.row(1), bias.slice(s![0, 18..24]));
    assert!(matches!(nets.mapping_codes(array![[1.0, 2.0]].view()), Err(IdfError::Shape(_))));
}

#[test]
fn film_identity_doubling_and_fbar() {
    let nets = small_nets(GridMode::Volume);
    let fbar = array![[0.3], [-0.7], [(1.0f64).tanh()]];
    let zero: Codes<f64> = (0..2).map(|_| (Array2::zeros((3, 6)), Array2::zeros((3, 6)))).collect();
    let plain = nets.displacement.forward(fbar.view()).unwrap().column(0).to_owned();
    assert_eq!(nets.film_displacement(fbar.view(), &zero).unwrap(), plain);

    // γ = 2 doubles the first pre-activation: same as doubling its weights and bias
    let mut doubled = nets.displacement.clone();
    doubled.layers[0].weight.mapv_inplace(|w| 2.0 * w);
    doubled.layers[0].bias.mapv_inplace(|b| 2.0 * b);
    let mut codes = zero.clone();
    codes[0].0.fill(2.0);
    let expect = doubled.forward(fbar.view()).unwrap().column(0).to_owned();
    let got = nets.film_displacement(fbar.view(), &codes).unwrap();
    assert!((&expect - &got).iter().all(|v| v.abs() < 1e-15));
    assert!(got.iter().all(|v| v.abs() < nets.alpha));
    assert!((fbar[[2, 0]] - 0.7615941559557649).abs() < 1e-15);
    assert!(matches!(nets.film_displacement(fbar.view(), &zero[..1].to_vec()), Err(IdfError::Shape(_))));
}

fn tape_total(base: &SinusoidalNetwork<f64>, nets: &TransferNets<f64>, grid: &GridInputs<f64>, x: &Array2<f64>) -> (f64, Vec<Array2<f64>>, Array2<f64>, Array2<f64>) {
    let mut t = Tape::new();
    let vars = TransferVars::register(&mut t, nets);
    let f = transfer_fields(&mut t, base, nets, &vars, grid, x.clone()).unwrap();
    // a loss touching values and gradients
    let g2 = t.square(f.grad);
    let v2 = t.square(f.value);
    let a = t.mean(g2);
    let b = t.mean(v2);
    let loss = t.add(a, b);
    let mut g = t.backward(loss).unwrap();
    let mut grads = idf_core::siren::collect_grads(&mut g, &vars.encoder, &nets.encoder);
    grads.extend(idf_core::siren::collect_grads(&mut g, &vars.conv, &nets.conv));
    grads.extend(idf_core::siren::collect_grads(&mut g, &vars.mapping, &nets.mapping));
    grads.extend(idf_core::siren::collect_grads(&mut g, &vars.displacement, &nets.displacement));
    (t.scalar(loss), grads, t.value(f.value).clone(), t.value(f.grad).clone())
}

#[test]
fn tape_path_matches_direct_evaluation_and_differences() {
    for mode in [GridMode::Volume, GridMode::Plane { axis: 2 }] {
        let base = sphere_base();
        let nets = small_nets(mode);
        let cloud = BumpySphere::default().sample(300, 8).unwrap();
        let grid = GridInputs::new(&nets.layout, &cloud);
        let x = near_surface_points(12, 4);
        let (_, grads, values, input_grads) = tape_total(&base, &nets, &grid, &x);

        let model = TransferModel { base: base.clone(), nets: nets.clone(), grid: nets.build_grid(&cloud).unwrap() };
        let direct = model.compose_sdf(x.view()).unwrap();
        for i in 0..12 {
            assert!((values[[i, 0]] - direct[i]).abs() < 1e-12);
        }
        // input gradient through φ, f̄ and the base normal
        let h = 1e-6;
        for i in 0..4 {
            for k in 0..3 {
                let mut p = x.slice(s![i..i + 1, ..]).to_owned();
                let mut m = p.clone();
                p[[0, k]] += h;
                m[[0, k]] -= h;
                let fd = (model.compose_sdf(p.view()).unwrap()[0] - model.compose_sdf(m.view()).unwrap()[0]) / (2.0 * h);
                assert!((fd - input_grads[[i, k]]).abs() < 1e-4 * fd.abs().max(1.0), "{fd} vs {}", input_grads[[i, k]]);
            }
        }
        // parameter gradients of every component
        let mut probe = nets.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut flat = 0;
        let sizes: Vec<usize> = [probe.encoder.params(), probe.conv.params(), probe.mapping.params(), probe.displacement.params()]
            .iter()
            .flat_map(|p| p.iter().map(|a| a.len()).collect::<Vec<_>>())
            .collect();
        for (gi, &size) in sizes.iter().enumerate() {
            for _ in 0..2 {
                let j = rng.random_range(0..size);
                let analytic = grads[gi].iter().nth(j).copied().unwrap();
                let eval = |delta: f64, probe: &mut TransferNets<f64>| {
                    with_param(probe, gi, j, delta);
                    let v = tape_total(&base, probe, &GridInputs::new(&probe.layout, &cloud), &x).0;
                    with_param(probe, gi, j, -delta);
                    v
                };
                let eps = 1e-6;
                let fd = (eval(eps, &mut probe) - eval(-eps, &mut probe)) / (2.0 * eps);
                assert!((fd - analytic).abs() < 1e-4 * fd.abs().max(1e-2), "param {gi}/{j}: {fd} vs {analytic}");
                flat += 1;
            }
        }
        assert!(flat > 0);
    }
}

fn with_param(nets: &mut TransferNets<f64>, group: usize, j: usize, delta: f64) {
    let mut all: Vec<&mut Array2<f64>> = Vec::new();
    all.extend(nets.encoder.params_mut());
    all.extend(nets.conv.params_mut());
    all.extend(nets.mapping.params_mut());
    all.extend(nets.displacement.params_mut());
    *all[group].iter_mut().nth(j).unwrap() += delta;
}

#[test]
fn zero_displacement_reproduces_target_base() {
    let mut nets = small_nets(GridMode::Volume);
    nets.displacement.zero_output_layer();
    let base = sphere_base();
    let cloud = sphere_cloud(0.5, 200, 2).unwrap();
    let model = TransferModel { base: base.clone(), grid: nets.build_grid(&cloud).unwrap(), nets };
    let x = near_surface_points(100, 7);
    assert_eq!(model.compose_sdf(x.view()).unwrap(), base.forward(x.view()).unwrap().column(0).to_owned());
}

#[test]
fn pipeline_steps_must_run_in_order() {
    let cloud = sphere_cloud(0.5, 64, 1).unwrap();
    let p = TransferPipeline::<f64>::new(TransferConfig::default());
    assert!(matches!(p.assemble(&cloud), Err(IdfError::PipelineOrder(_))));
    let mut p = TransferPipeline::<f64>::new(TransferConfig::default());
    assert!(matches!(p.fit_displacement(&cloud, &cloud), Err(IdfError::PipelineOrder(_))));
}

#[test]
fn bundle_round_trip() {
    let nets = small_nets(GridMode::Plane { axis: 1 });
    let cloud = sphere_cloud(0.5, 100, 2).unwrap();
    let model = TransferModel { base: sphere_base(), grid: nets.build_grid(&cloud).unwrap(), nets }.cast_to_f32_round_trip();
    let dir = tempfile::tempdir().unwrap();
    model.save_bundle(dir.path()).unwrap();
    assert_eq!(TransferModel::<f32>::load_bundle(dir.path()).unwrap(), model);
}

trait CastF32 {
    fn cast_to_f32_round_trip(&self) -> TransferModel<f32>;
}

impl CastF32 for TransferModel<f64> {
    fn cast_to_f32_round_trip(&self) -> TransferModel<f32> {
        TransferModel { base: self.base.cast(), nets: self.nets.cast(), grid: FeatureGrid { layout: self.grid.layout.clone(), features: self.grid.features.mapv(|v| v as f32) } }
    }
}
